#!/usr/bin/env python3
"""
Exceptions for the h-PMD library
All library errors derive from HpmdError so the CLI can map them to exit codes
"""

from dataclasses import dataclass
from typing import List


class HpmdError(Exception):
    """Base class for every error raised by the library"""


class DimensionError(HpmdError, ValueError):
    """Array shapes do not agree"""


class InvalidModelError(HpmdError, ValueError):
    """An MDP, policy or environment spec violates its invariants"""


class ConvergenceError(HpmdError, RuntimeError):
    """An iterative procedure hit its iteration cap or a solve broke down"""


class DesignError(HpmdError):
    """No design set satisfying the Kiefer-Wolfowitz conditions was found"""


class MissingParameterError(HpmdError, LookupError):
    """A policy reconstruction needs a parameter vector that was never fitted"""


@dataclass(frozen=True)
class ConfigIssue:
    field: str
    message: str

    def __str__(self) -> str:
        return f"{self.field}: {self.message}"


class ConfigError(HpmdError):
    """Configuration could not be parsed or validated"""

    def __init__(self, issues: List[ConfigIssue]):
        self.issues = list(issues)
        super().__init__("; ".join(str(issue) for issue in self.issues))
