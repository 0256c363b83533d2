from .extract import ExtractorConfig, ExtractorError, extract
from .mrgf import FormatError, read_records, write_records
from .verify import verify

__all__ = ["ExtractorConfig", "ExtractorError", "extract", "FormatError",
           "read_records", "write_records", "verify"]
