"""Metric report generation and output."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

from .config import Config
from .storage import write_atomic
from .utils import Formatter


@dataclass
class MetricReport:
    """Evaluation results of one run.

    Serialised as `key=value` lines (machine-readable) or as an aligned table.
    """

    metrics: dict[str, float] = field(default_factory=dict)
    """Metric name to value (m for displacement metrics, nats for NLL)."""

    samples: int = Config.BON_SAMPLES
    """N used for best-of-N metrics."""

    kde_samples: int = Config.KDE_SAMPLES
    """Samples drawn per example for the KDE NLL."""

    count: int = 0
    """Number of evaluated examples."""

    runtime_ms: float | None = None
    """Mean wall time per prediction."""

    config_hash: str = ""
    """Digest of the producing run configuration."""

    flags: list[str] = field(default_factory=list)
    """Notes such as degenerate KDE steps."""

    def to_dict(self) -> dict[str, Any]:
        """Convert the report to a flat dictionary, header fields first."""
        data: dict[str, Any] = {
            "format_version": Config.FORMAT_VERSION,
            "config": self.config_hash,
            "count": self.count,
            "n": self.samples,
            "kde_samples": self.kde_samples,
        }
        if self.runtime_ms is not None:
            data["runtime_ms"] = self.runtime_ms
        data.update(self.metrics)
        if self.flags:
            data["flags"] = ",".join(self.flags)
        return data

    def to_text(self) -> str:
        """`key=value` lines in a fixed order."""
        return "".join(f"{key}={_plain(value)}\n" for key, value in self.to_dict().items())

    def to_table(self) -> str:
        """Human-readable table of metric values with units."""
        width = max((len(k) for k in self.metrics), default=6)
        lines = [f"{'metric':<{width}}  value", f"{'-' * width}  -----"]
        for name, value in self.metrics.items():
            unit = Formatter.unit_for(name)
            lines.append(f"{name:<{width}}  {Formatter.format_value(value)} {unit}".rstrip())
        lines.append(f"({self.count} examples, N={self.samples})")
        return "\n".join(lines)

    def save(self, path: str) -> None:
        """Atomically write the `key=value` form."""
        write_atomic(path, self.to_text())


def _plain(value: Any) -> str:
    return repr(value) if isinstance(value, float) else str(value)


def output_report(report: MetricReport) -> None:
    """Print the table form to stdout."""
    print(report.to_table())
