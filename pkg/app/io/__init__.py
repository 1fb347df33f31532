from .bundle import DatasetBundle, load_bundle, weekly_mean, write_bundle
from .report import emit_report, parameter_table, summarize

__all__ = ["DatasetBundle", "emit_report", "load_bundle", "parameter_table", "summarize", "weekly_mean", "write_bundle"]
