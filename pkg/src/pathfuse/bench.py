"""Accuracy, H-score, FLOPs accounting, and the toy multi-source experiment.

FLOPs follow the 2-ops-per-multiply-add convention. Conv counts
2*C2*H2*W2*C1*U*V; a linear head counts 2*M*D; an unfused BN counts
2*C*H*W; merge, bias, ReLU, and pooling count one op per element involved.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import adapt as adapt_mod
from . import multipath, nn
from .data import LabeledSet, gen_domain, split
from .tensor import Tensor, _conv_out_size

METHODS = ("source-ens", "shot-ens", "shot-ens+kd", "seprep", "seprep-unfused")


def h_score(s: float, t: float) -> float:
    """Harmonic mean of source and target accuracy, in percent."""
    if not (0.0 <= s <= 100.0 and 0.0 <= t <= 100.0):
        raise ValueError("h_score inputs must lie in [0, 100]")
    if s + t == 0:
        return 0.0
    return 2.0 * s * t / (s + t)


def flops_count(model: nn.ModelBundle, input_shape=None):
    """(extractor, heads, total) op counts for one forward pass."""
    if input_shape is None:
        input_shape = (1, model.arch.in_channels, *model.arch.input_hw)
    n, c, h, w = input_shape
    k = model.arch.kernel_size
    extractor = 0
    for unit in model.units:
        if isinstance(unit, multipath.MultiPathUnit):
            stride, pad = unit.pathways[0].stride, unit.pathways[0].padding
            c2 = unit.pathways[0].kernels.shape[0]
        elif isinstance(unit, multipath.FusedConv):
            stride, pad = unit.stride, unit.padding
            c2 = unit.kernels.shape[0]
        else:
            stride, pad = unit.stride, unit.padding
            c2 = unit.kernels.shape[0]
        h2 = _conv_out_size(h, k, stride, pad)
        w2 = _conv_out_size(w, k, stride, pad)
        conv = 2 * c2 * h2 * w2 * c * k * k
        out_elems = c2 * h2 * w2
        if isinstance(unit, multipath.MultiPathUnit):
            paths = len(unit.pathways)
            extractor += paths * conv          # K convolutions
            extractor += paths * 2 * out_elems  # K unfused BNs
            extractor += 2 * paths * out_elems  # weighted-sum merge
        elif isinstance(unit, multipath.FusedConv):
            extractor += conv + out_elems       # conv + bias add
        else:
            extractor += conv + 2 * out_elems   # conv + unfused BN
        extractor += out_elems                   # ReLU
        c, h, w = c2, h2, w2
    extractor += c * h * w                       # global average pool
    heads = sum(2 * wt.shape[0] * wt.shape[1] for wt, _ in model.heads)
    return n * extractor, n * heads, n * (extractor + heads)


@dataclass
class EvalReport:
    source_accuracies: dict
    source_mean: float
    target_accuracy: float
    h: float
    flops_extractor: int
    flops_heads: int
    flops_total: int
    wall_clock: float
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "source_accuracies": self.source_accuracies,
            "S": self.source_mean,
            "T": self.target_accuracy,
            "H": self.h,
            "flops_extractor": self.flops_extractor,
            "flops_heads": self.flops_heads,
            "flops_total": self.flops_total,
            "wall_clock_s": self.wall_clock,
            "config": self.config,
        }


def batched_predict(predict_fn, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    chunks = [predict_fn(images[i:i + batch_size])
              for i in range(0, images.shape[0], batch_size)]
    return np.concatenate(chunks)


def model_predict_fn(model: nn.ModelBundle, weight_mode: str = "per_batch",
                     criterion: str = "entropy"):
    def fn(images):
        probs, _ = multipath.predict(model, Tensor(images), weight_mode, criterion)
        return probs
    return fn


def evaluate(predict_fn, source_tests: dict, target_test: LabeledSet,
             flops=(0, 0, 0), config=None) -> EvalReport:
    """Top-1 accuracies per domain; S averages source domains unweighted."""
    start = time.perf_counter()
    source_acc = {}
    for name, ds in source_tests.items():
        if len(ds) == 0:
            raise ValueError(f"evaluate: empty test set {name!r}")
        probs = batched_predict(predict_fn, ds.images)
        source_acc[name] = nn.accuracy(probs, ds.labels)
    if len(target_test) == 0:
        raise ValueError("evaluate: empty target test set")
    target_acc = nn.accuracy(batched_predict(predict_fn, target_test.images),
                             target_test.labels)
    s = float(np.mean(list(source_acc.values()))) if source_acc else 0.0
    return EvalReport(
        source_accuracies=source_acc,
        source_mean=s,
        target_accuracy=target_acc,
        h=h_score(s, target_acc),
        flops_extractor=flops[0],
        flops_heads=flops[1],
        flops_total=flops[2],
        wall_clock=time.perf_counter() - start,
        config=config or {},
    )


@dataclass
class ExperimentConfig:
    domain_specs: list = None            # list[DomainSpec]; default 4-domain benchmark
    target_index: int = 2                # invert, the strongest default shift
    classes: int = 10
    methods: tuple = METHODS
    train_fraction: float = 5.0 / 7.0    # 500 train / 200 test of 700 per class
    source_epochs: int = 20
    source_lr: float = 0.05
    adapt_epochs: int = 12
    adapt_lr: float = 0.01
    kd_epochs: int = 12
    kd_lr: float = 0.02
    kd_temperature: float = 2.0
    criterion: str = "entropy"
    weight_mode: str = "per_batch"
    seed: int = 0

    def fingerprint(self) -> dict:
        d = dict(self.__dict__)
        d["domain_specs"] = [s.to_dict() for s in (self.domain_specs or [])]
        d["methods"] = list(self.methods)
        return d


def prepare_domains(cfg: ExperimentConfig):
    """Generate and split every domain; returns (train_sets, test_sets)."""
    from .data import default_benchmark
    specs = cfg.domain_specs or default_benchmark()
    trains, tests = [], []
    for i, spec in enumerate(specs):
        full = gen_domain(spec, cfg.classes)
        tr, te = split(full, (cfg.train_fraction, 1.0 - cfg.train_fraction),
                       seed=cfg.seed + 101 * i)
        trains.append(tr)
        tests.append(te)
    return trains, tests


def train_sources(cfg: ExperimentConfig, trains, source_idx):
    """One model per source domain, all from a shared initialization so the
    assembled pathways live in compatible feature spaces."""
    return [nn.train_source(trains[i], nn.ArchSpec(num_classes=cfg.classes),
                            epochs=cfg.source_epochs, lr=cfg.source_lr,
                            seed=cfg.seed + 13 * i, init_seed=cfg.seed)
            for i in source_idx]


def run_experiment(cfg: ExperimentConfig, sources=None, trains=None, tests=None):
    """One target choice, one row per method: S, T, H, FLOPs.

    ``sources``/``trains``/``tests`` allow reuse of pretrained source models
    across target choices; they are rebuilt when omitted.
    """
    for m in cfg.methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}")
    if trains is None or tests is None:
        trains, tests = prepare_domains(cfg)
    n_domains = len(trains)
    if not 0 <= cfg.target_index < n_domains:
        raise ValueError("target_index out of range")
    source_idx = [i for i in range(n_domains) if i != cfg.target_index]
    if sources is None:
        sources = train_sources(cfg, trains, source_idx)
    source_tests = {f"domain{i}": tests[i] for i in source_idx}
    target_train = trains[cfg.target_index].images
    target_test = tests[cfg.target_index]

    acfg = adapt_mod.AdaptConfig(epochs=cfg.adapt_epochs, lr=cfg.adapt_lr,
                                 criterion=cfg.criterion, seed=cfg.seed + 7)
    rows = []
    cache = {}

    def shot_singles():
        if "shot_singles" not in cache:
            singles = []
            for i, src in enumerate(sources):
                assembled = multipath.assemble([src])
                cfg_i = adapt_mod.AdaptConfig(epochs=cfg.adapt_epochs, lr=cfg.adapt_lr,
                                              criterion=cfg.criterion,
                                              seed=cfg.seed + 7 + i)
                singles.append(multipath.fuse_model(adapt_mod.adapt(assembled, target_train, cfg_i)))
            cache["shot_singles"] = singles
        return cache["shot_singles"]

    def seprep_models():
        if "seprep" not in cache:
            assembled = multipath.assemble(sources)
            adapted = adapt_mod.adapt(assembled, target_train, acfg)
            cache["seprep"] = (adapted, multipath.fuse_model(adapted))
        return cache["seprep"]

    for method in cfg.methods:
        if method == "source-ens":
            ens = [multipath.fuse_model(multipath.assemble([s])) for s in sources]
            fn = lambda imgs, ens=ens: adapt_mod.ensemble_baseline(ens, Tensor(imgs))
            fl = tuple(sum(v) for v in zip(*[flops_count(m) for m in ens]))
        elif method == "shot-ens":
            singles = shot_singles()
            fn = lambda imgs, s=singles: adapt_mod.ensemble_baseline(s, Tensor(imgs))
            fl = tuple(sum(v) for v in zip(*[flops_count(m) for m in singles]))
        elif method == "shot-ens+kd":
            singles = shot_singles()
            teacher = lambda imgs, s=singles: batched_predict(
                lambda b: adapt_mod.ensemble_baseline(s, Tensor(b)), imgs)
            student0 = nn.init_model(nn.ArchSpec(num_classes=cfg.classes),
                                     seed=cfg.seed + 997)
            student = adapt_mod.kd_distill(teacher, student0, target_train,
                                           temperature=cfg.kd_temperature,
                                           epochs=cfg.kd_epochs, lr=cfg.kd_lr,
                                           seed=cfg.seed + 31)
            fn = lambda imgs, st=student: np.exp(
                np.concatenate([_logp(st, imgs[i:i + 256]) for i in range(0, len(imgs), 256)]))
            fl = flops_count(student)
        elif method == "seprep":
            _, fused = seprep_models()
            fn = model_predict_fn(fused, cfg.weight_mode, cfg.criterion)
            fl = flops_count(fused)
        elif method == "seprep-unfused":
            adapted, _ = seprep_models()
            fn = model_predict_fn(adapted, cfg.weight_mode, cfg.criterion)
            fl = flops_count(adapted)
        report = evaluate(fn, source_tests, target_test, flops=fl,
                          config={"method": method, **cfg.fingerprint()})
        rows.append({"method": method, **report.to_dict()})
    return rows


def criterion_ablation(cfg: ExperimentConfig | None = None,
                       sources=None, trains=None, tests=None):
    """Run the adapted multi-pathway method once per uncertainty criterion.

    Returns one row per criterion with S/T/H, shaped like a
    criterion-comparison table. Sources/datasets are reused across criteria.
    """
    import dataclasses
    cfg = cfg or ExperimentConfig()
    if trains is None or tests is None:
        trains, tests = prepare_domains(cfg)
    if sources is None:
        source_idx = [i for i in range(len(trains)) if i != cfg.target_index]
        sources = train_sources(cfg, trains, source_idx)
    rows = []
    for crit in multipath.CRITERIA:
        c = dataclasses.replace(cfg, criterion=crit, methods=("seprep",))
        row = run_experiment(c, sources=sources, trains=trains, tests=tests)[0]
        rows.append({"criterion": crit, "S": row["S"], "T": row["T"],
                     "H": row["H"], "flops_total": row["flops_total"]})
    return rows


def _logp(model: nn.ModelBundle, images: np.ndarray) -> np.ndarray:
    from .tensor import log_softmax
    return log_softmax(model.forward(Tensor(images), train=False)[0]).data


def write_report(rows, csv_path=None, json_path=None) -> None:
    """Emit the comparison table; one row per method."""
    if json_path:
        with open(json_path, "w") as f:
            json.dump(rows, f, indent=2)
    if csv_path:
        cols = ["method", "S", "T", "H", "flops_extractor", "flops_heads", "flops_total"]
        with open(csv_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(cols)
            for row in rows:
                writer.writerow([row[c] for c in cols])


def format_table(rows) -> str:
    header = f"{'method':<16}{'S':>8}{'T':>8}{'H':>8}{'FLOPs':>14}"
    lines = [header, "-" * len(header)]
    for row in rows:
        lines.append(f"{row['method']:<16}{row['S']:>8.1f}{row['T']:>8.1f}"
                     f"{row['H']:>8.1f}{row['flops_total']:>14d}")
    return "\n".join(lines)
