"""3D Dice evaluation and the experiment matrix (local / centralized / federated)."""
from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .fedcore import ClientState, FederationConfig, run_federation
from .model import unet_forward
from .synthdata import DEFAULT_GRID, DOMAIN_IDS, ClientSpec, build_client_datasets, dataset_slices, restack
from .transport import make_transport

log = logging.getLogger(__name__)

STRATEGIES = ("local", "centralized", "federated")
CSV_HEADER = ["strategy", "augmentation", "modality", "class", "volume_id", "seed", "dice"]


def dice_score(pred: np.ndarray, target: np.ndarray, cls: int) -> float:
    """2|P & T| / (|P| + |T|) for class ``cls``; 1.0 when both are empty."""
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"dice_score: shapes differ {pred.shape} vs {target.shape}")
    p = pred == cls
    t = target == cls
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & t).sum()) / denom


def predict_slices(params, cfg, slices, domain: int | None = None, batch_size: int = 16) -> np.ndarray:
    """Argmax labels for each slice, restacked by slice index into (D, H, W)."""
    ordered = sorted(slices, key=lambda s: s.slice_index)
    restack(ordered)  # validates indices
    out = []
    for i in range(0, len(ordered), batch_size):
        batch = np.stack([s.image for s in ordered[i:i + batch_size]])
        logits = unet_forward(params, batch, cfg, domain=domain, train_mode=False)
        out.append(logits.data.argmax(axis=1))
    return np.concatenate(out).astype(np.uint8)


def evaluate_volume(params, cfg, slices, domain: int | None = None, classes=None) -> dict:
    """Per foreground class 3D Dice for one volume given as slices."""
    _, target = restack(slices)
    pred = predict_slices(params, cfg, slices, domain)
    classes = classes or range(1, cfg.num_classes)
    return {c: dice_score(pred, target, c) for c in classes}


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentSpec:
    strategy: str  # local | centralized | federated
    augmentation: str = "none"  # none | gin | fourier
    norm_mode: str = "batch"  # batch | dsbn
    clients: tuple = ()  # ClientSpec, training data
    test_volumes: int = 10
    val_volumes: int = 2
    seeds: tuple = (0, 1, 2)
    data_seed: int = 1000
    grid: tuple = DEFAULT_GRID
    federation: FederationConfig = field(default_factory=FederationConfig)
    transport: str = "inprocess"
    label: str = ""

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if len(self.seeds) < 1:
            raise ValueError("need at least one repetition seed")
        if self.strategy == "federated" and len(self.clients) < 2:
            raise ValueError("federated experiments need at least 2 clients")
        if self.strategy == "local" and len(self.clients) != 1:
            raise ValueError("local experiments train exactly one client")

    @property
    def method(self) -> str:
        return "dsbn" if self.norm_mode == "dsbn" else self.augmentation

    @property
    def name(self) -> str:
        if self.label:
            return self.label
        if self.strategy == "local":
            return f"local-{self.clients[0].modality}"
        return self.strategy


@dataclass
class MetricRow:
    strategy: str
    augmentation: str
    modality: str
    cls: int
    volume_id: str
    seed: int
    dice: float
    both_empty: bool = False


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)
    runtime: float = 0.0
    histories: dict = field(default_factory=dict)

    def extend(self, other: "MetricsReport") -> None:
        self.rows.extend(other.rows)
        self.runtime += other.runtime
        self.histories.update(other.histories)

    def aggregate(self) -> dict:
        """(strategy, augmentation, modality, class) -> (mean over rows, std over per-seed means, n seeds)."""
        groups: dict = {}
        for r in self.rows:
            groups.setdefault((r.strategy, r.augmentation, r.modality, r.cls), {}).setdefault(r.seed, []).append(
                r.dice)
        out = {}
        for key, per_seed in groups.items():
            allv = [d for v in per_seed.values() for d in v]
            seed_means = [float(np.mean(v)) for v in per_seed.values()]
            out[key] = (float(np.mean(allv)), float(np.std(seed_means)), len(per_seed))
        return out

    def mean_dice(self, strategy, augmentation, modality=None, cls=None, seed=None) -> float:
        vals = [r.dice for r in self.rows if r.strategy == strategy and r.augmentation == augmentation
                and (modality is None or r.modality == modality) and (cls is None or r.cls == cls)
                and (seed is None or r.seed == seed)]
        if not vals:
            raise KeyError(f"no rows for {strategy}/{augmentation}/{modality}/{cls}")
        return float(np.mean(vals))


def held_out_set(spec: ExperimentSpec) -> dict:
    """Held-out volumes per modality, seeds disjoint from every training client."""
    specs = [ClientSpec(f"test{m}", m, spec.test_volumes, spec.data_seed + 900 + i, "test")
             for i, m in enumerate(sorted(DOMAIN_IDS))]
    return build_client_datasets(specs, spec.grid)


def validation_set(spec: ExperimentSpec, modalities) -> dict:
    specs = [ClientSpec(f"val{m}", m, spec.val_volumes, spec.data_seed + 800 + DOMAIN_IDS[m], "val")
             for m in sorted(modalities)]
    return build_client_datasets(specs, spec.grid) if spec.val_volumes > 0 else {}


def _domain_of(sample) -> int:
    return DOMAIN_IDS[sample.modality]


def train_strategy(spec: ExperimentSpec, train: dict, seed: int, val: dict | None = None, transport=None):
    """Train one repetition; returns the :class:`FederationResult`."""
    config = replace(spec.federation, augmentation=spec.augmentation, seed=seed,
                     unet=replace(spec.federation.unet, norm_mode=spec.norm_mode))
    if spec.strategy == "federated":
        clients = [ClientState(i, dataset_slices(train[cs.client_id]), cs.modality, DOMAIN_IDS[cs.modality])
                   for i, cs in enumerate(spec.clients)]
    else:
        samples = [s for cs in spec.clients for s in dataset_slices(train[cs.client_id])]
        modality = "+".join(sorted({cs.modality for cs in spec.clients}))
        clients = [ClientState(0, samples, modality, DOMAIN_IDS[spec.clients[0].modality])]
    val_groups = None
    if val:
        val_groups = [(dataset_slices(v), DOMAIN_IDS[v[0].modality]) for _, v in sorted(val.items())]
    transport = transport or make_transport(spec.transport)
    return run_federation(config, clients, transport, val_groups, domain_of=_domain_of)


def run_experiment(spec: ExperimentSpec, train: dict | None = None, test: dict | None = None) -> MetricsReport:
    """Train every repetition seed, evaluate the final model on both held-out modalities."""
    t0 = time.perf_counter()
    train = train if train is not None else build_client_datasets(spec.clients, spec.grid)
    test = test if test is not None else held_out_set(spec)
    val = validation_set(spec, {cs.modality for cs in spec.clients})
    report = MetricsReport()
    cfg = replace(spec.federation.unet, norm_mode=spec.norm_mode)
    for seed in spec.seeds:
        result = train_strategy(spec, train, seed, val)
        report.histories[(spec.name, spec.method, seed)] = result.history
        for group in sorted(test):
            for vol in test[group]:
                scores = evaluate_volume(result.final_params, cfg, vol.slices(), DOMAIN_IDS[vol.modality])
                _, target = vol.image, vol.labels
                for c, d in scores.items():
                    report.rows.append(MetricRow(spec.name, spec.method, vol.modality, c, vol.volume_id, seed, d,
                                                 both_empty=not (target == c).any() and d == 1.0))
        log.info("%s/%s seed %d done", spec.name, spec.method, seed)
    report.runtime = time.perf_counter() - t0
    return report


# ---------------------------------------------------------------------------
# CSV


def write_metrics_csv(report: MetricsReport, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in report.rows:
            w.writerow([r.strategy, r.augmentation, r.modality, r.cls, r.volume_id, r.seed, repr(float(r.dice))])


def read_metrics_csv(path) -> MetricsReport:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise ValueError(f"unexpected CSV header {header}")
        rows = [MetricRow(s, a, m, int(c), v, int(seed), float(d)) for s, a, m, c, v, seed, d in reader]
    return MetricsReport(rows)


def summary_markdown(report: MetricsReport, class_names=None) -> str:
    """One row per (strategy, method), one column per (class, modality): mean +- std."""
    agg = report.aggregate()
    class_names = class_names or {1: "large", 2: "small"}
    configs = list(dict.fromkeys((k[0], k[1]) for k in agg))
    mods = sorted({k[2] for k in agg})
    classes = sorted({k[3] for k in agg})
    cols = [(c, m) for c in classes for m in mods]
    buf = io.StringIO()
    buf.write("| strategy | method | " + " | ".join(f"{class_names.get(c, c)} {m}" for c, m in cols) + " |\n")
    buf.write("|---|---|" + "---|" * len(cols) + "\n")
    for s, a in configs:
        cells = []
        for c, m in cols:
            v = agg.get((s, a, m, c))
            cells.append("-" if v is None else f"{v[0]:.3f} ± {v[1]:.3f}")
        buf.write(f"| {s} | {a} | " + " | ".join(cells) + " |\n")
    flagged = sum(r.both_empty for r in report.rows)
    if flagged:
        buf.write(f"\n{flagged} measurement(s) had an empty class in both prediction and target (scored 1.0).\n")
    return buf.getvalue()
