from .runner import Job, MalformedJob, main, parse_job, run_job

__all__ = ["Job", "MalformedJob", "main", "parse_job", "run_job"]
__version__ = "0.1.0"
