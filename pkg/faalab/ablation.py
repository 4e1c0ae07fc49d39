"""
Ablation grid: alignment loss x fusion scoring x pair selection.

Six configurations are trained on the same data and evaluated on 1:2
matching (U) and retrieval. Results are exported as JSON and Markdown.
"""

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

from faalab.evalsuite import evaluate_model
from faalab.runconfig import RunConfig
from faalab.synthworld import Dataset
from faalab.trainer import AblationConfig, train

logger = logging.getLogger(__name__)

# (loss, fusion_scoring, effective pair selection)
ABLATION_GRID: Tuple[Tuple[str, bool, bool], ...] = (
    ("contrastive", False, False),
    ("contrastive", True, False),
    ("ms", False, False),
    ("ms", False, True),
    ("ms", True, False),
    ("ms", True, True),
)


@dataclass
class AblationRow:
    loss: str
    fusion_scoring: bool
    pair_selection: str
    acc_v2f_u: float
    acc_f2v_u: float
    map_v2f: float
    map_f2v: float
    best_epoch: int
    final_clusters: int


def row_config(base: AblationConfig, loss: str, fusion: bool, effective: bool) -> AblationConfig:
    return base.model_copy(update={
        "loss": loss,
        "fusion_scoring": fusion,
        "pair_selection": "progressive_hardneg" if effective else "fixed_random",
    })


def run_ablation(dataset: Dataset, config: RunConfig, threads: int = 1,
                 grid: Sequence[Tuple[str, bool, bool]] = ABLATION_GRID) -> List[AblationRow]:
    """Train and evaluate every grid configuration with the same seeds."""
    rows = []
    test_videos = dataset.partition("test")
    for i, (loss, fusion, effective) in enumerate(grid, start=1):
        ablation = row_config(config.ablation, loss, fusion, effective)
        logger.info(
            f"Ablation {i}/{len(grid)}: loss={loss} fusion={fusion} pairs={ablation.pair_selection}"
        )
        result = train(dataset, config.train, ablation, config.eval, threads=threads)
        report = evaluate_model(
            result.best.restore(), test_videos, config.eval,
            scoring="fusion" if fusion else "cosine",
            protocols=("matching", "retrieval"),
            threads=threads,
            config_hash=config.config_hash(),
        )
        rows.append(AblationRow(
            loss=loss,
            fusion_scoring=fusion,
            pair_selection=ablation.pair_selection,
            acc_v2f_u=report.acc_v2f_u,
            acc_f2v_u=report.acc_f2v_u,
            map_v2f=report.map_v2f,
            map_f2v=report.map_f2v,
            best_epoch=result.best.epoch,
            final_clusters=result.final_progress.clusters,
        ))
    return rows


def _find(rows: Sequence[AblationRow], loss: str, fusion: bool, pairs: str) -> Optional[AblationRow]:
    for row in rows:
        if row.loss == loss and row.fusion_scoring == fusion and row.pair_selection == pairs:
            return row
    return None


def trend_checks(rows: Sequence[AblationRow]) -> Dict[str, bool]:
    """
    Direction checks over a full grid:

    ms_beats_contrastive_map: every MS row beats every contrastive row on retrieval mAP
    fusion_beats_cosine_contrastive / fusion_ge_cosine_ms: fusion vs cosine on 1:2 matching
    effective_selection_ge_fixed_map: progressive + hard negatives vs fixed C + random negatives on mAP
    """
    def mean_map(row):
        return (row.map_v2f + row.map_f2v) / 2.0

    def mean_acc(row):
        return (row.acc_v2f_u + row.acc_f2v_u) / 2.0

    ms_rows = [r for r in rows if r.loss == "ms"]
    con_rows = [r for r in rows if r.loss == "contrastive"]
    con_off = _find(rows, "contrastive", False, "fixed_random")
    con_on = _find(rows, "contrastive", True, "fixed_random")
    ms_off = _find(rows, "ms", False, "fixed_random")
    ms_on = _find(rows, "ms", True, "fixed_random")
    fixed = _find(rows, "ms", True, "fixed_random")
    effective = _find(rows, "ms", True, "progressive_hardneg")
    return {
        "ms_beats_contrastive_map": bool(ms_rows and con_rows)
        and min(mean_map(r) for r in ms_rows) > max(mean_map(r) for r in con_rows),
        "fusion_beats_cosine_contrastive": bool(con_off and con_on) and mean_acc(con_on) > mean_acc(con_off),
        "fusion_ge_cosine_ms": bool(ms_off and ms_on) and mean_acc(ms_on) >= mean_acc(ms_off),
        "effective_selection_ge_fixed_map": bool(fixed and effective) and mean_map(effective) >= mean_map(fixed),
    }


class AblationExporter:
    """Export ablation rows as JSON and Markdown."""

    @classmethod
    def export_json(cls, rows: Sequence[AblationRow], config_hash: str = "") -> Dict[str, object]:
        return {
            "config_hash": config_hash,
            "rows": [asdict(r) for r in rows],
            "trends": trend_checks(rows),
        }

    @classmethod
    def export_markdown(cls, rows: Sequence[AblationRow]) -> str:
        lines = [
            "# Ablation",
            "",
            "| Alignment loss | Fusion encoder | Effective pair selection "
            "| Matching V2F (U) | Matching F2V (U) | mAP V2F | mAP F2V |",
            "|---|---|---|---|---|---|---|",
        ]
        for r in rows:
            loss = "Multi-similarity" if r.loss == "ms" else "Contrastive"
            fusion = "yes" if r.fusion_scoring else "no"
            pairs = "yes" if r.pair_selection == "progressive_hardneg" else "no"
            lines.append(
                f"| {loss} | {fusion} | {pairs} | {100 * r.acc_v2f_u:.2f} | {100 * r.acc_f2v_u:.2f} "
                f"| {100 * r.map_v2f:.2f} | {100 * r.map_f2v:.2f} |"
            )
        return "\n".join(lines) + "\n"


def write_ablation(rows: Sequence[AblationRow], out_dir: Union[str, Path], config_hash: str = "") -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = AblationExporter.export_json(rows, config_hash)
    (out / "ablation.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    (out / "ablation.md").write_text(AblationExporter.export_markdown(rows))
    logger.info(f"Wrote ablation table ({len(rows)} rows) to {out}")
