"""Two-stage spatially decomposed learning of AC optimal power flow."""
from .netmodel import NetworkCase, builtin_case, case_stats, load_case, parse_case

__version__ = "0.1.0"
__all__ = ["NetworkCase", "builtin_case", "case_stats", "load_case", "parse_case"]
