"""Grid sweeps over RunConfig overrides.

Grid file syntax, one entry per line (``#`` starts a comment)::

    optim.epochs = 5                       # fixed for every cell
    loss.gamma = 0 | 0.0001 | 0.1          # one axis, three values
    views.local_scale & views.global_scale = [0.05, 0.25] & [0.25, 1] | [0.05, 0.5] & [0.5, 1]

Keys joined with ``&`` vary together. Cells are the cartesian product of all
axes in file order, the last axis varying fastest.
"""
from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

from satdino.config import RunConfig
from satdino.exceptions import ConfigurationError

logger = logging.getLogger(__name__)

SUMMARY_NAME = "summary.csv"
SUMMARY_FIELDS = ("cell", "overrides", "steps", "final_l_dino", "final_l_gsd",
                  "min_entropy", "knn_top1", "run_dir")


@dataclass
class Grid:
    fixed: dict = field(default_factory=dict)
    axes: list = field(default_factory=list)  # [(keys, [values tuple, ...])]

    def cells(self) -> list[dict]:
        choices = [[dict(zip(keys, vals)) for vals in values] for keys, values in self.axes]
        out = []
        for combo in itertools.product(*choices):
            cell = {}
            for part in combo:
                cell.update(part)
            out.append(cell)
        return out

    @property
    def varied_keys(self) -> list[str]:
        return [k for keys, _ in self.axes for k in keys]


def parse_grid(text: str) -> Grid:
    grid = Grid()
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"grid line {lineno}: expected 'key = values'")
        lhs, rhs = line.split("=", 1)
        keys = [k.strip() for k in lhs.split("&")]
        if any(not k for k in keys):
            raise ConfigurationError(f"grid line {lineno}: empty key")
        for k in keys:
            if k in seen:
                raise ConfigurationError(f"grid line {lineno}: key {k!r} listed twice")
            seen.add(k)
        options = [opt.strip() for opt in rhs.split("|")]
        values = []
        for opt in options:
            parts = [p.strip() for p in opt.split("&")]
            if len(parts) != len(keys) or any(not p for p in parts):
                raise ConfigurationError(
                    f"grid line {lineno}: {opt!r} does not give one value per key {keys}"
                )
            values.append(tuple(parts))
        if len(values) == 1:
            grid.fixed.update(zip(keys, values[0]))
        else:
            grid.axes.append((keys, values))
    return grid


def shipped_grids() -> list[str]:
    root = resources.files("satdino") / "grids"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".grid"))


def read_grid(path_or_name) -> Grid:
    """Parse a grid file, or a shipped grid by name (e.g. ``table7a``)."""
    path = Path(path_or_name)
    if path.is_file():
        return parse_grid(path.read_text(encoding="utf-8"))
    name = str(path_or_name)
    if name in shipped_grids():
        res = resources.files("satdino") / "grids" / f"{name}.grid"
        return parse_grid(res.read_text(encoding="utf-8"))
    raise ConfigurationError(
        f"no grid file {path_or_name!r} (shipped grids: {', '.join(shipped_grids())})"
    )


def cell_configs(grid: Grid, base: Optional[RunConfig] = None,
                 overrides: Optional[dict] = None) -> list[tuple[dict, RunConfig]]:
    """Resolve every cell: base, then ``overrides``, then fixed grid keys, then the cell."""
    out = []
    for cell in grid.cells():
        cfg = (base or RunConfig()).copy()
        cfg.update(overrides or {})
        cfg.update(grid.fixed)
        cfg.update(cell)
        out.append((cell, cfg.validate()))
    return out


def _summarise(cell_id: str, cell: dict, state, knn_top1, run_dir) -> dict:
    hist = state.history
    return {
        "cell": cell_id,
        "overrides": "; ".join(f"{k}={v}" for k, v in cell.items()),
        "steps": len(hist),
        "final_l_dino": repr(hist[-1]["l_dino"]) if hist else "",
        "final_l_gsd": repr(hist[-1]["l_gsd"]) if hist else "",
        "min_entropy": repr(min(m["entropy"] for m in hist)) if hist else "",
        "knn_top1": "" if knn_top1 is None else repr(knn_top1),
        "run_dir": str(run_dir),
    }


def run_sweep(grid: Grid, data_dir, out_dir, base: Optional[RunConfig] = None,
              overrides: Optional[dict] = None, k: int = 20) -> Path:
    """Pretrain and kNN-evaluate every cell; returns the summary CSV path."""
    from satdino.data import load_dataset
    from satdino.evaluation import extract_features, knn_classify
    from satdino.train import RunDirectory, pretrain

    manifest = load_dataset(data_dir)
    train = manifest.load_samples("train") or manifest.load_samples()
    val = manifest.load_samples("val")
    configs = cell_configs(grid, base, overrides)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, (cell, cfg) in enumerate(configs):
        cell_id = f"cell_{i:03d}"
        run = RunDirectory(out_dir / cell_id)
        logger.info("%s: %s", cell_id, cell)
        state = pretrain(cfg, train, run.root)
        top1 = None
        if val:
            backbone = state.teacher.backbone
            size = cfg.views.global_out
            tr = extract_features(backbone, [s.image for s in train], [s.label for s in train],
                                  size, 1.0, state.norm)
            va = extract_features(backbone, [s.image for s in val], [s.label for s in val],
                                  size, 1.0, state.norm)
            top1 = knn_classify(tr, va, min(k, len(train)), n_classes=len(manifest.categories)).top1
        rows.append(_summarise(cell_id, cell, state, top1, run.root))
    return write_summary(rows, out_dir / SUMMARY_NAME)


def write_summary(rows: Sequence[dict], path) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return Path(path)


def read_summary(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))

