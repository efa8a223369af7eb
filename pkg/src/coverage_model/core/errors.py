# src/coverage_model/core/errors.py
from typing import Iterable, List, Optional, Tuple


class CoverageModelError(Exception):
    """Base class for all errors raised by the coverage model package."""


class DataParseError(CoverageModelError, ValueError):
    """
    Raised when an input CSV row cannot be parsed.

    Attributes:
        path: The file being parsed.
        line: 1-based line number in the file (the header is line 1).
    """
    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        self.path = path
        self.line = line
        location = ""
        if path is not None:
            location = f"{path}"
            if line is not None:
                location += f", line {line}"
            location += ": "
        super().__init__(f"{location}{message}")


class DuplicateRecordError(CoverageModelError, ValueError):
    """Raised when admin/official records repeat a (country, vaccine, year, source) key."""
    def __init__(self, keys: Iterable[Tuple]):
        self.keys: List[Tuple] = list(keys)
        listed = "; ".join(",".join(str(part) for part in key) for key in self.keys)
        super().__init__(f"Duplicate (country, vaccine, year, source) records: {listed}")


class ModelDomainError(CoverageModelError, ValueError):
    """Raised for out-of-domain structural inputs such as |rho| >= 1 or empty dimensions."""


class SamplerInitError(CoverageModelError, RuntimeError):
    """Raised when the log posterior is not finite at a chain's starting point."""
    def __init__(self, block: str, chain_id: int):
        self.block = block
        self.chain_id = chain_id
        super().__init__(f"Non-finite log posterior at initialization of chain {chain_id} (block '{block}').")


class MissingDenominatorError(CoverageModelError, KeyError):
    """Raised when regional aggregation lacks target-population rows."""
    def __init__(self, keys: Iterable[Tuple[str, str, int]]):
        self.keys = list(keys)
        listed = "; ".join(f"{c},{v},{y}" for c, v, y in self.keys)
        super().__init__(f"Missing denominators for (country, vaccine, year): {listed}")

    def __str__(self) -> str:
        return self.args[0]


class ArtifactError(CoverageModelError, FileNotFoundError):
    """Raised when a pipeline stage cannot find or read the artifact of an earlier stage."""


class InsufficientDrawsError(CoverageModelError, ValueError):
    """Raised when a summary needs more posterior draws or overlapping keys than available."""
