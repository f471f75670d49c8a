"""Static report artifacts: experiment manifests, curve files, overlay
panels, rendered point-wise tables, and saliency grids.

Every figure is a static image; reports are regenerable from manifests alone.
"""

from __future__ import annotations

import hashlib
import json
import os
from datetime import datetime, timezone

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .config import TrainConfig, config_hash  # noqa: E402
from .errors import ConfigError, ContractError  # noqa: E402
from .evalkit import PointwiseTable, RobustnessCurve  # noqa: E402

MANIFEST_NAME = "manifest.json"


def experiment_id(config: TrainConfig) -> str:
    return f"{config.mode}-{config.profile}-seed{config.seed}-{config_hash(config)[:8]}"


def write_manifest(out_dir: str, config: TrainConfig, checkpoints, artifacts,
                   extra: dict | None = None) -> str:
    """Write the experiment manifest; every referenced path must exist."""
    for path in list(checkpoints) + list(artifacts):
        if not os.path.exists(path):
            raise ContractError(f"manifest references missing path {path!r}")
    manifest = {
        "id": experiment_id(config),
        "config_hash": config_hash(config),
        "config": config.to_json(),
        "profile": config.profile,
        "mode": config.mode,
        "seed": config.seed,
        "checkpoints": [os.path.abspath(p) for p in checkpoints],
        "artifacts": [os.path.abspath(p) for p in artifacts],
        "created": datetime.now(timezone.utc).isoformat(),
    }
    path = os.path.join(out_dir, MANIFEST_NAME)
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def read_manifest(path: str) -> dict:
    with open(path) as f:
        return json.load(f)


def threat_hash(threat_json: dict) -> str:
    blob = json.dumps(threat_json, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def write_curve_csv(curve: RobustnessCurve, path: str) -> None:
    with open(path, "w") as f:
        f.write("epsilon,accuracy,n,attack_config_hash\n")
        for eps, acc, cfg in zip(curve.epsilons, curve.accuracies, curve.attack_configs):
            f.write(f"{eps},{acc},{curve.sample_count},{threat_hash(cfg)}\n")


def write_curve_json(curve: RobustnessCurve, path: str) -> None:
    with open(path, "w") as f:
        json.dump(curve.to_json(), f, indent=2, sort_keys=True)
        f.write("\n")


def read_curve_json(path: str) -> RobustnessCurve:
    with open(path) as f:
        raw = json.load(f)
    return RobustnessCurve(raw["model"], raw["model_kind"], raw["train_epsilon"],
                           tuple(raw["epsilons"]), tuple(raw["accuracies"]),
                           tuple(raw["attack_configs"]), raw["sample_count"])


_STYLES = {"composite": "-", "classifier": "-."}


def plot_curve(curve: RobustnessCurve, path: str) -> None:
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(curve.epsilons, curve.accuracies, _STYLES.get(curve.model_kind, "-"),
            marker="o", label=curve.model_name)
    ax.set_xlabel("evaluation epsilon")
    ax.set_ylabel("accuracy")
    ax.set_ylim(-0.02, 1.02)
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_curve_overlays(curves, path: str):
    """One panel per training budget; solid lines for composite models,
    dot-dash for plain classifiers. Returns the panel budgets rendered."""
    train_epsilons = sorted({c.train_epsilon for c in curves}, key=lambda v: (v is None, v))
    fig, axes = plt.subplots(1, len(train_epsilons),
                             figsize=(4.5 * len(train_epsilons), 4), squeeze=False)
    for ax, eps_t in zip(axes[0], train_epsilons):
        for curve in curves:
            if curve.train_epsilon != eps_t:
                continue
            ax.plot(curve.epsilons, curve.accuracies,
                    _STYLES.get(curve.model_kind, "-"), marker="o",
                    label=curve.model_name)
        ax.set_title(f"train epsilon = {eps_t}")
        ax.set_xlabel("evaluation epsilon")
        ax.set_ylabel("accuracy")
        ax.set_ylim(-0.02, 1.02)
        ax.grid(alpha=0.3)
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return train_epsilons


def render_pointwise_table(table: PointwiseTable, path: str) -> None:
    """Rendered table with per-row shading: darker cells are better."""
    fig, ax = plt.subplots(figsize=(1.6 + 1.2 * len(table.columns),
                                    0.6 + 0.4 * len(table.rows)))
    ax.axis("off")
    cell_text = [[f"{a:.3f}" for a in row] for row in table.cells]
    colors = []
    n = len(table.columns)
    for rank_row in table.ranks:
        # rank 1 (best) gets the darkest shade
        colors.append([str(0.55 + 0.4 * (r - 1) / max(n - 1, 1)) for r in rank_row])
    tab = ax.table(cellText=cell_text, cellColours=colors,
                   rowLabels=[f"eps={e}" for e in table.rows],
                   colLabels=list(table.columns), loc="center")
    tab.scale(1.0, 1.4)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_image_grid(rows, path: str, cmap="gray") -> None:
    """rows: list of (row_label, [(col_label, HxW or HxWxC array)]).

    Used for both adversarial-example grids and saliency grids; the column
    layout mirrors clean-plus-budget sweeps.
    """
    n_rows = len(rows)
    n_cols = max(len(r[1]) for r in rows)
    fig, axes = plt.subplots(n_rows, n_cols, figsize=(1.4 * n_cols, 1.5 * n_rows),
                             squeeze=False)
    for i, (row_label, cells) in enumerate(rows):
        for j in range(n_cols):
            ax = axes[i][j]
            ax.set_xticks([])
            ax.set_yticks([])
            if j >= len(cells):
                ax.axis("off")
                continue
            title, image = cells[j]
            if image.ndim == 3 and image.shape[-1] == 1:
                image = image[..., 0]
            ax.imshow(image, cmap=cmap if image.ndim == 2 else None,
                      vmin=0.0, vmax=1.0)
            if i == 0:
                ax.set_title(title, fontsize=8)
            if j == 0:
                ax.set_ylabel(row_label, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def group_curves_for_report(curve_paths):
    """Load curve JSONs and require a single dataset geometry per overlay."""
    curves = [read_curve_json(p) for p in curve_paths]
    grids = {tuple(c.epsilons) for c in curves}
    if len(grids) > 1:
        raise ConfigError(
            f"cannot overlay curves with different epsilon grids: {sorted(grids)}"
        )
    return curves
