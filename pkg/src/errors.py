"""
Exception hierarchy for the meta-learning lab
"""
from typing import Any, Dict, List, Optional


class MetaLabError(Exception):
    """Base class for every error raised by the lab"""


class ContractViolation(MetaLabError, ValueError):
    """A documented precondition was not met by the caller"""


class FeedbackNotApplicable(ContractViolation):
    """The test-task gradient has zero norm, so cosine weights are undefined"""


class NumericalFailure(MetaLabError, ArithmeticError):
    """Non-finite loss, gradient or metric value"""

    def __init__(self, message: str, **context: Any):
        self.message = message
        self.context: Dict[str, Any] = {k: v for k, v in context.items() if v is not None}
        super().__init__(self._render())

    def _render(self) -> str:
        if not self.context:
            return self.message
        where = ", ".join(f"{key}={value}" for key, value in self.context.items())
        return f"{self.message} ({where})"

    def with_context(self, **context: Any) -> "NumericalFailure":
        """Return a copy carrying additional outer context (existing keys win)"""
        merged = {**context, **self.context}
        return NumericalFailure(self.message, **merged)


class ConfigError(MetaLabError):
    """Invalid experiment configuration"""

    def __init__(self, problems: List[str], source: Optional[str] = None):
        self.problems = problems
        self.source = source
        header = f"Invalid config {source}" if source else "Invalid config"
        super().__init__(header + ":\n" + "\n".join(f"  - {p}" for p in problems))
