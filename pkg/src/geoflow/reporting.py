"""Deterministic CSV tables, SVG panels, and the run manifest.

Numeric CSV content is formatted to 17 significant digits so re-runs with the
same configuration and seeds are byte-identical.  SVG panels are rendered by
matplotlib with a pinned hash salt, path-embedded fonts, and no date metadata,
which makes them byte-stable too; each plotted series carries a stable element
id so panels can be checked structurally.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

SVG_RC = {
    "svg.hashsalt": "geoflow",
    "svg.fonttype": "path",
}


def format_number(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.17g}"
    return str(value)


def atomic_write_bytes(path, payload: bytes):
    path = os.fspath(path)
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as handle:
        handle.write(payload)
    os.replace(tmp, path)


def emit_csv(records, schema, path) -> str:
    """Write rows under a header; every float at 17 significant digits."""
    lines = [",".join(schema)]
    for row in records:
        if isinstance(row, dict):
            row = [row[col] for col in schema]
        if len(row) != len(schema):
            raise ValueError(f"row width {len(row)} != schema width {len(schema)}")
        lines.append(",".join(format_number(v) for v in row))
    payload = ("\n".join(lines) + "\n").encode()
    atomic_write_bytes(path, payload)
    return os.fspath(path)


@dataclass(frozen=True)
class Series:
    kind: str                  # line | band | hline | scatter
    label: str = None
    gid: str = None
    x: np.ndarray = None
    y: np.ndarray = None
    y_lo: np.ndarray = None    # band
    y_hi: np.ndarray = None
    value: float = None        # hline
    color: str = None
    linestyle: str = "-"


@dataclass(frozen=True)
class Heatmap:
    x_edges: np.ndarray
    y_edges: np.ndarray
    values: np.ndarray
    cmap: str = "viridis"
    log_scale: bool = False


@dataclass(frozen=True)
class PanelSpec:
    title: str = ""
    xlabel: str = ""
    ylabel: str = ""
    series: tuple = ()
    background: Heatmap = None
    xscale: str = "linear"
    yscale: str = "linear"
    legend: bool = True
    figsize: tuple = (6.0, 4.5)
    equal_aspect: bool = False


def emit_svg(panel: PanelSpec, path) -> str:
    """Render one panel to a self-contained, byte-stable SVG file."""
    with plt.rc_context(SVG_RC):
        fig, ax = plt.subplots(figsize=panel.figsize)
        if panel.background is not None:
            bg = panel.background
            values = bg.values
            if bg.log_scale:
                values = np.log10(np.maximum(values, 1e-300))
            ax.pcolormesh(bg.x_edges, bg.y_edges, values, cmap=bg.cmap,
                          shading="auto", rasterized=False)
        for s in panel.series:
            if s.kind == "line":
                ax.plot(s.x, s.y, label=s.label, gid=s.gid, color=s.color,
                        linestyle=s.linestyle, linewidth=1.6)
            elif s.kind == "scatter":
                ax.scatter(s.x, s.y, label=s.label, gid=s.gid, color=s.color,
                           s=28, zorder=5)
            elif s.kind == "band":
                ax.fill_between(s.x, s.y_lo, s.y_hi, alpha=0.25, label=s.label,
                                gid=s.gid, color=s.color, linewidth=0)
            elif s.kind == "hline":
                ax.axhline(s.value, label=s.label, gid=s.gid, color=s.color or "grey",
                           linestyle=s.linestyle or "--", linewidth=1.2)
            else:
                raise ValueError(f"unknown series kind {s.kind!r}")
        ax.set_xscale(panel.xscale)
        ax.set_yscale(panel.yscale)
        ax.set_title(panel.title)
        ax.set_xlabel(panel.xlabel)
        ax.set_ylabel(panel.ylabel)
        if panel.equal_aspect:
            ax.set_aspect("equal")
        if panel.legend and any(s.label for s in panel.series):
            ax.legend(fontsize=8, framealpha=0.9)
        fig.tight_layout()
        import io

        buffer = io.BytesIO()
        fig.savefig(buffer, format="svg", metadata={"Date": None})
        plt.close(fig)
    atomic_write_bytes(path, buffer.getvalue())
    return os.fspath(path)


@dataclass
class RunManifest:
    scenario: str
    scenario_hash: str
    version: str
    config_echo: dict
    files: list = field(default_factory=list)     # (name, sha256)
    gates: list = field(default_factory=list)     # (name, passed, detail)
    notes: list = field(default_factory=list)

    def add_file(self, path):
        with open(path, "rb") as handle:
            digest = hashlib.sha256(handle.read()).hexdigest()
        self.files.append((os.path.basename(os.fspath(path)), digest))

    def add_gate(self, name, passed, detail=""):
        self.gates.append((name, bool(passed), detail))

    @property
    def all_gates_pass(self) -> bool:
        return all(passed for _, passed, _ in self.gates)

    def failures(self):
        return [(name, detail) for name, passed, detail in self.gates if not passed]

    def write(self, path) -> str:
        lines = [
            f"scenario = {self.scenario}",
            f"scenario_hash = {self.scenario_hash}",
            f"version = {self.version}",
        ]
        for key in sorted(self.config_echo):
            value = self.config_echo[key]
            if isinstance(value, list):
                value = ", ".join(str(v) for v in value)
            lines.append(f"config.{key} = {value}")
        for name, digest in sorted(self.files):
            lines.append(f"file.{name} = {digest}")
        for name, passed, detail in self.gates:
            suffix = f"  # {detail}" if detail else ""
            lines.append(f"gate.{name} = {'pass' if passed else 'FAIL'}{suffix}")
        for note in self.notes:
            lines.append(f"note = {note}")
        atomic_write_bytes(path, ("\n".join(lines) + "\n").encode())
        return os.fspath(path)
