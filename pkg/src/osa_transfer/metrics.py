"""AHI error metrics, the ten transfer configurations and cross-validation."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Mapping, Sequence

import numpy as np

from . import events as ev
from .dataset import DelayMode, NightData, make_folds
from .errors import MetricsError, ModelError
from .model import Checkpoint, TrainConfig, fine_tune, predict_segments
from .physio import global_median_delay

log = logging.getLogger(__name__)

TASKS = {"S": "single", "M": "multi"}
TRANSFERS = {"NF": None, "F": "frozen", "UF": "full"}
DELAYS = {"": DelayMode.NONE, "FD": DelayMode.FIXED_GLOBAL, "SD": DelayMode.NIGHT_SPECIFIC}


@dataclass(frozen=True)
class ConfigId:
    task: str
    transfer: str
    delay: str = ""

    def __post_init__(self):
        if self.task not in TASKS or self.transfer not in TRANSFERS or self.delay not in DELAYS:
            raise MetricsError(f"invalid configuration {self}")
        if self.delay and (self.task != "M" or self.transfer == "NF"):
            raise MetricsError(f"delayed labels need a fine-tuned multi-task model: {self}")

    @classmethod
    def parse(cls, text: str) -> "ConfigId":
        parts = text.strip().upper().split("-")
        if len(parts) not in (2, 3):
            raise MetricsError(f"cannot parse configuration {text!r}")
        return cls(*parts)

    def __str__(self) -> str:
        return "-".join(p for p in (self.task, self.transfer, self.delay) if p)

    @property
    def task_mode(self) -> str:
        return TASKS[self.task]

    @property
    def strategy(self) -> str | None:
        return TRANSFERS[self.transfer]

    @property
    def delay_mode(self) -> DelayMode:
        return DELAYS[self.delay]


ALL_CONFIGS = tuple(ConfigId.parse(c) for c in (
    "S-NF", "S-F", "S-UF", "M-NF", "M-F", "M-UF", "M-F-FD", "M-UF-FD", "M-F-SD", "M-UF-SD"))


def parse_grid(text: str) -> list[ConfigId]:
    if not text.strip():
        return []
    if text.strip().lower() == "all":
        return list(ALL_CONFIGS)
    return [ConfigId.parse(c) for c in text.split(",") if c.strip()]


def _pair(pred, ref):
    p = np.asarray(pred, dtype=np.float64)
    r = np.asarray(ref, dtype=np.float64)
    if p.shape != r.shape or p.ndim != 1:
        raise MetricsError(f"length mismatch: {p.shape} vs {r.shape}")
    if p.size == 0:
        raise MetricsError("need at least one pair")
    return p, r


def mae(pred: Sequence[float], ref: Sequence[float]) -> float:
    p, r = _pair(pred, ref)
    return float(np.mean(np.abs(p - r)))


def rmse(pred: Sequence[float], ref: Sequence[float]) -> float:
    p, r = _pair(pred, ref)
    return float(np.sqrt(np.mean((p - r) ** 2)))


@dataclass
class ResultTable:
    night_ids: list[str]
    scored: list[float]
    predicted: dict[str, list[float]] = field(default_factory=dict)
    printed_footer: dict[str, dict[str, float]] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def configs(self) -> list[str]:
        return list(self.predicted)

    def footer(self) -> dict[str, dict[str, float]]:
        return {c: {"MAE": mae(v, self.scored), "RMSE": rmse(v, self.scored)}
                for c, v in self.predicted.items()}


def load_table1() -> ResultTable:
    """Published per-patient scored and predicted AHI values, with the printed footer."""
    text = resources.files("osa_transfer").joinpath("data/table1.csv").read_text()
    return parse_report_csv(text, id_column="id")


def parse_report_csv(text: str, id_column: str = "night_id") -> ResultTable:
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows:
        raise MetricsError("empty report")
    fields = list(rows[0])
    if id_column not in fields or "scored_ahi" not in fields:
        raise MetricsError(f"report needs '{id_column}' and 'scored_ahi' columns")
    configs = []
    for f in fields[fields.index("scored_ahi") + 1:]:
        try:
            configs.append(str(ConfigId.parse(f)))
        except MetricsError:
            continue
    table = ResultTable([], [], {c: [] for c in configs})
    for r in rows:
        key = r[id_column].strip()
        if key in ("MAE", "RMSE"):
            table.printed_footer[key] = {c: float(r[c]) for c in configs if r.get(c, "").strip()}
            continue
        table.night_ids.append(key)
        table.scored.append(float(r["scored_ahi"]))
        for c in configs:
            table.predicted[c].append(float(r[c]))
    return table


def render_report(table: ResultTable) -> tuple[str, str]:
    """CSV and aligned text renderings, two decimals, MAE/RMSE footer rows."""
    configs = table.configs
    footer = table.footer() if table.night_ids else {}
    header = ["night_id", "scored_ahi"] + configs
    rows = [[n, f"{s:.2f}"] + [f"{table.predicted[c][i]:.2f}" for c in configs]
            for i, (n, s) in enumerate(zip(table.night_ids, table.scored))]
    if configs and table.night_ids:
        for metric in ("MAE", "RMSE"):
            rows.append([metric, ""] + [f"{footer[c][metric]:.2f}" for c in configs])
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    lines = ["  ".join(str(x).rjust(w) for x, w in zip(r, widths)) for r in [header] + rows]
    if len(rows) > len(table.night_ids):
        lines.insert(len(table.night_ids) + 1, "-" * len(lines[0]))
    return buf.getvalue(), "\n".join(lines) + "\n"


def _adult_for(adult, task_mode: str) -> Checkpoint:
    if isinstance(adult, Checkpoint):
        return adult.as_task(task_mode)
    if task_mode in adult:
        return adult[task_mode]
    if task_mode == "single" and "multi" in adult:
        return adult["multi"].as_task("single")
    raise ModelError(f"no adult checkpoint compatible with task mode {task_mode!r}")


def night_ahi(net, night: NightData, threshold: float = ev.DEFAULT_THRESHOLD) -> float:
    y_hat, _ = predict_segments(net, night.features.values)
    events = ev.group_segments(list(zip(night.features.windows, y_hat)), threshold)
    return ev.compute_ahi(events, night.record.sleep_time_h).ahi


def run_cv(nights: Sequence[NightData], adult: Checkpoint | Mapping[str, Checkpoint],
           configs: Sequence[ConfigId], seed: int = 0, k: int = 5,
           train_config: TrainConfig | None = None, leak_free: bool = True,
           threshold: float = ev.DEFAULT_THRESHOLD) -> ResultTable:
    """Cross-patient k-fold evaluation of each configuration.

    Every night is predicted exactly once, by the fold that holds it out.
    ``leak_free`` restricts FD/SD delay estimation to each fold's training nights.
    """
    configs = [ConfigId.parse(c) if isinstance(c, str) else c for c in configs]
    by_id = {n.night_id: n for n in nights}
    plan = make_folds([n.record for n in nights], k, seed)
    names = [str(c) for c in configs]
    pred: dict[str, dict[str, float]] = {c: {} for c in names}
    base = {c.task_mode: _adult_for(adult, c.task_mode) for c in configs}

    cohort_delay = None
    if not leak_free and any(c.delay for c in configs):
        cohort_delay = global_median_delay([n.delays for n in nights if n.delays is not None])

    for c in configs:
        if c.strategy is None:
            for n in nights:
                pred[str(c)][n.night_id] = night_ahi(base[c.task_mode].net, n, threshold)

    for fold in range(len(plan)):
        train = [by_id[i] for i in plan.train_ids(fold)]
        test = [by_id[i] for i in plan.test_ids(fold)]
        for c in configs:
            if c.strategy is None:
                continue
            cfg = train_config or TrainConfig.paediatric(c.strategy == "frozen")
            cfg = replace(cfg, seed=seed * 1000 + fold)
            log.info("fold %d: fine-tuning %s on %d nights", fold, c, len(train))
            ckpt = fine_tune(base[c.task_mode], train, c.strategy, c.delay_mode, cfg,
                             task_mode=c.task_mode, global_delay_s=cohort_delay)
            for n in test:
                pred[str(c)][n.night_id] = night_ahi(ckpt.net, n, threshold)

    order = [i for f in plan.folds for i in f]
    order.sort(key=[n.night_id for n in nights].index)
    table = ResultTable(order, [_scored_ahi(by_id[i]) for i in order],
                        {c: [pred[c][i] for i in order] for c in names},
                        meta={"seed": seed, "k": k, "leak_free": leak_free, "threshold": threshold,
                              "folds": plan.folds})
    return table


def _scored_ahi(night: NightData) -> float:
    rec = night.record
    if "scored_ahi" in rec.extra:
        return float(rec.extra["scored_ahi"])
    return len(rec.annotations) / rec.sleep_time_h
