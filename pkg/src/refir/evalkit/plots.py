from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _label(point) -> str:
    parts = [point.provider]
    if point.provider != "none":
        parts += [f"s={point.scale:g}", point.sites, point.fusion_mode]
        if not point.sg:
            parts.append("noSG")
        if not point.da:
            parts.append("noDA")
        if point.provider == "retrieved":
            parts.append(f"k={point.k}")
    return " ".join(parts)


def plot_results(table, out_dir) -> list[Path]:
    """One bar chart per metric, plus a metric-vs-scale curve when scales vary."""
    out_dir = Path(out_dir)
    written = []
    labels = [_label(p) for p, _ in table.rows]
    for metric in table.metrics:
        fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(labels) + 2), 4))
        ax.bar(range(len(labels)), [v[metric] for _, v in table.rows])
        ax.set_xticks(range(len(labels)), labels, rotation=60, ha="right", fontsize=7)
        ax.set_ylabel(metric)
        fig.tight_layout()
        path = out_dir / f"{metric}_bars.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        written.append(path)

        curves = defaultdict(list)
        for p, v in table.rows:
            if p.provider != "none":
                curves[(p.provider, p.sites, p.fusion_mode, p.sg, p.da, p.k)].append((p.scale, v[metric]))
        curves = {k: sorted(c) for k, c in curves.items() if len(c) > 1}
        if curves:
            fig, ax = plt.subplots(figsize=(5, 4))
            for key, pts in curves.items():
                ax.plot([s for s, _ in pts], [m for _, m in pts], marker="o", label=" ".join(map(str, key[:3])))
            ax.set_xlabel("scale s")
            ax.set_ylabel(metric)
            ax.legend(fontsize=7)
            fig.tight_layout()
            path = out_dir / f"{metric}_vs_scale.png"
            fig.savefig(path, dpi=100)
            plt.close(fig)
            written.append(path)
    return written
