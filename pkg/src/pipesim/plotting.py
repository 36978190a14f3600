"""Matplotlib figures and the CSV tables written next to them."""

from __future__ import annotations

import csv
import io
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .render import COLORS, COMM_COLOR  # noqa: E402
from .schedule import OpKind  # noqa: E402
from .simulator import COMPUTE, SimReport  # noqa: E402


def timeline_csv(report: SimReport) -> str:
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow(["worker", "lane", "op", "microbatch", "version", "start", "end"])
    for e in report.timeline:
        out.writerow([e.worker, e.lane, e.kind.value,
                      "" if e.microbatch is None else e.microbatch,
                      "" if e.weight_version is None else e.weight_version,
                      repr(e.start), repr(e.end)])
    return buf.getvalue()


def memory_csv(report: SimReport) -> str:
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow(["worker", "time", "weight_versions", "activation_stashes", "bytes"])
    for w, tr in enumerate(report.memory):
        for s in tr.samples:
            out.writerow([w, repr(s.time), s.weight_versions, s.activation_stashes,
                          repr(s.bytes_resident)])
    return buf.getvalue()


def summary_csv(report: SimReport) -> str:
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow(["worker", "peak_bytes", "peak_versions", "peak_stashes"])
    for w, tr in enumerate(report.memory):
        out.writerow([w, repr(tr.peak_bytes), tr.peak_versions, tr.peak_stashes])
    return buf.getvalue()


def gantt_png(report: SimReport, path: str, max_time: float = None) -> None:
    fig, ax = plt.subplots(figsize=(12, 0.6 * report.config.depth + 1.2))
    for e in report.timeline:
        if e.end <= e.start or e.lane != COMPUTE:
            continue
        if max_time is not None and e.start >= max_time:
            continue
        color = COLORS.get(e.kind, COMM_COLOR)
        ax.barh(e.worker, e.end - e.start, left=e.start, color=color, edgecolor="black",
                linewidth=0.4)
        if e.kind in (OpKind.FORWARD, OpKind.BACKWARD) and e.microbatch is not None:
            ax.text((e.start + e.end) / 2, e.worker, str(e.microbatch), ha="center",
                    va="center", fontsize=6)
    ax.set_yticks(range(report.config.depth))
    ax.set_yticklabels([f"worker {w + 1}" for w in range(report.config.depth)])
    ax.invert_yaxis()
    ax.set_xlabel("time (s)")
    ax.set_title(f"{report.policy.value}: d={report.config.depth} m={report.config.microbatches}")
    if max_time is not None:
        ax.set_xlim(0, max_time)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def memory_png(report: SimReport, path: str) -> None:
    fig, ax = plt.subplots(figsize=(8, 3.5))
    for w, tr in enumerate(report.memory):
        ts = [s.time for s in tr.samples]
        gb = [s.bytes_resident / 1e9 for s in tr.samples]
        ax.step(ts, gb, where="post", label=f"worker {w + 1}")
    ax.set_xlabel("time (s)")
    ax.set_ylabel("resident GB")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def loss_png(comparison, path: str) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.semilogy(comparison.vanilla, label="vanilla")
    ax.semilogy(comparison.two_bw, "--", label="2BW (1-stale)")
    ax.set_xlabel("batch")
    ax.set_ylabel("training loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plan_png(result, path: str, top: int = 15) -> None:
    cands = result.ranked_alternatives[:top]
    fig, ax = plt.subplots(figsize=(8, 0.3 * max(len(cands), 1) + 1.5))
    labels = [f"w={c.config.width} d={c.config.depth} b={c.config.microbatch_size}"
              f"{' r' if c.config.recompute else ''} {c.execution.value}" for c in cands]
    ax.barh(range(len(cands)), [c.throughput for c in cands], color="#6baed6")
    ax.set_yticks(range(len(cands)))
    ax.set_yticklabels(labels, fontsize=7)
    ax.invert_yaxis()
    ax.set_xlabel("predicted samples/s")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_report_bundle(report: SimReport, out_dir: str, stem: str = "sim") -> list:
    """Write PNG figures and CSV tables for one simulation; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for name, text in (("timeline", timeline_csv(report)), ("memory", memory_csv(report)),
                       ("summary", summary_csv(report))):
        p = os.path.join(out_dir, f"{stem}_{name}.csv")
        with open(p, "w") as fh:
            fh.write(text)
        paths.append(p)
    p = os.path.join(out_dir, f"{stem}_gantt.png")
    gantt_png(report, p)
    paths.append(p)
    p = os.path.join(out_dir, f"{stem}_memory.png")
    memory_png(report, p)
    paths.append(p)
    return paths
