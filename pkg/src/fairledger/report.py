"""Files written for a finished run: JSON lines, proof files and figures."""
from __future__ import annotations

import json
from collections import Counter, defaultdict
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .audit import dump_proof  # noqa: E402
from .owac import Kind, ViolationReport  # noqa: E402

_MSG = "01"


def jsonl(records: Iterable[Mapping]) -> str:
    return "".join(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n" for r in records)


def read_jsonl(path: Path) -> list[dict]:
    out = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            out.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}:{n}: {exc}") from exc
    return out


def pretty(reports: Sequence[ViolationReport]) -> str:
    if not reports:
        return "no reports\n"
    lines = []
    for r in reports:
        lines.append(f"{r.kind.name:<5}  {r.rule:<40}  accused {r.accused.hex()[:16]}  "
                     f"by {r.reporter.hex()[:16]}  evidence {len(r.evidence)} items")
    return "\n".join(lines) + "\n"


def write_proofs(reports: Sequence[ViolationReport], out: Path) -> list[Path]:
    """One file per proof, numbered in report order."""
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for n, r in enumerate(x for x in reports if x.kind == Kind.PROOF):
        p = out / f"proof-{n:03d}.json"
        p.write_text(dump_proof(r))
        paths.append(p)
    return paths


# -- figures ------------------------------------------------------------------

def _sends(events: Sequence[Mapping]) -> dict[tuple[int, int], list[int]]:
    per: dict[tuple[int, int], list[int]] = defaultdict(list)
    for e in events:
        if e["ev"] == "frame" and e["frame"].startswith(_MSG):
            per[(e["src"], e["dst"])].append(e["t"])
    return per


def plot_sends(events: Sequence[Mapping], path: Path) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    for (src, dst), times in sorted(_sends(events).items()):
        ax.step(times, range(1, len(times) + 1), where="post", label=f"{src}→{dst}", lw=1)
    ax.set_xlabel("time")
    ax.set_ylabel("messages sent (cumulative)")
    ax.set_title("Channel sends")
    if ax.get_legend_handles_labels()[0]:
        ax.legend(fontsize=6, ncol=4, frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_queues(events: Sequence[Mapping], path: Path) -> None:
    per: dict[int, list[tuple[int, int]]] = defaultdict(list)
    for e in events:
        if e["ev"] == "summary":
            per[e["node"]].append((e["t"], e["size"]))
    fig, ax = plt.subplots(figsize=(7, 4))
    for node, pts in sorted(per.items()):
        ax.plot([t for t, _ in pts], [s for _, s in pts], marker=".", ms=3, lw=1, label=f"node {node}")
    ax.set_xlabel("time")
    ax.set_ylabel("outgoing queue size")
    ax.set_title("Queue size at each summary")
    if per:
        ax.legend(fontsize=7, frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_reports(reports: Sequence[ViolationReport], path: Path) -> None:
    counts = Counter((r.rule, r.kind.name.lower()) for r in reports)
    labels = [f"{rule} ({kind})" for rule, kind in sorted(counts)]
    fig, ax = plt.subplots(figsize=(7, max(2.0, 0.35 * len(labels) + 1)))
    if labels:
        ax.barh(labels, [counts[k] for k in sorted(counts)], color="tab:red")
    else:
        ax.text(0.5, 0.5, "no reports", ha="center", va="center", transform=ax.transAxes)
        ax.set_yticks([])
    ax.set_xlabel("reports")
    ax.set_title("Reports by rule")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_figures(events: Sequence[Mapping], reports: Sequence[ViolationReport], out: Path) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "sends.png", out / "queues.png", out / "reports.png"]
    plot_sends(events, paths[0])
    plot_queues(events, paths[1])
    plot_reports(reports, paths[2])
    return paths
