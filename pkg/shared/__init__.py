# Shared infrastructure components

# Make shared imports available
from .error_reporting import categorize_stage_errors
from .utils import clean_error_message, create_error_response, create_success_response, summarize_results


__all__ = [
    "clean_error_message",
    "create_error_response",
    "create_success_response",
    "summarize_results",
    "categorize_stage_errors",
]
