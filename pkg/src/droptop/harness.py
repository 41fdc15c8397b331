"""Replay-based online continual learning with optional attentive feature dropping.

One call to :func:`run` trains every seed of an :class:`ExperimentConfig` and
writes its artifacts; :func:`sweep` varies one intensity hyperparameter;
:func:`run_reference_pair` checks single-model intensity shifting against the
two-model reference.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import backbone as bb
from . import debias
from . import intensity as its
from . import metrics
from .replay import ReplayBuffer
from .stream import StreamConfig, generate, novel_class_images
from .tensor import mse, per_sample_cross_entropy, slice_rows, softmax_cross_entropy

log = logging.getLogger(__name__)

METHODS = ("er", "derpp")
DROPTOP_MODES = ("on", "off", "fixed", "random", "soft", "no_fusion")
ADAPTIVE_MODES = ("on", "soft", "no_fusion")
SWEEP_AXES = ("kappa0", "gamma", "alpha", "period")
RNG_STREAMS = {"data": 1, "init": 2, "mask": 3, "buffer": 4, "retrieval": 5}


@dataclass(frozen=True)
class ExperimentConfig:
    method: str = "er"
    droptop: str = "on"
    stream: StreamConfig = field(default_factory=StreamConfig)
    shift: its.ShiftConfig = field(default_factory=its.ShiftConfig)
    stem_channels: int = 16
    block_channels: tuple = (32, 64)
    batch_size: int = 32
    memory_batch_size: int = 32
    memory_capacity: int = 500
    memory_policy: str = ""
    lr: float = 0.1
    derpp_distill_coef: float = 0.2
    derpp_mem_ce_coef: float = 0.5
    common_intensity: bool = False
    seeds: tuple = (0, 1, 2, 3, 4)
    eval_every: int = 0
    dump_masks: bool = False
    workers: int = 1
    out_dir: str = ""

    @property
    def policy(self):
        return self.memory_policy or ("random" if self.method == "er" else "reservoir")

    def backbone_config(self, seed):
        return bb.BackboneConfig(
            input_channels=3, input_size=self.stream.image_size, stem_channels=self.stem_channels,
            block_channels=tuple(self.block_channels), num_classes=self.stream.num_classes, seed=seed,
        )

    def validate(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.droptop not in DROPTOP_MODES:
            raise ValueError(f"unknown droptop mode {self.droptop!r}; expected one of {DROPTOP_MODES}")
        if self.memory_policy not in ("", "random", "reservoir"):
            raise ValueError(f"unknown memory policy {self.memory_policy!r}")
        if self.batch_size < 1 or self.memory_batch_size < 0:
            raise ValueError("batch_size must be >= 1 and memory_batch_size >= 0")
        if self.memory_capacity < 0:
            raise ValueError("memory_capacity must be >= 0")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        self.stream.validate()
        self.shift.validate()
        self.backbone_config(0).validate()


# ---------------------------------------------------------------- config files

def _coerce(raw, current):
    raw = raw.strip()
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        return tuple(int(x) for x in raw.replace(",", " ").split())
    return raw


def apply_overrides(cfg: ExperimentConfig, pairs):
    """Apply ``key -> text`` overrides; nested fields use ``stream.`` / ``shift.`` prefixes."""
    top, nested = {}, {"stream": {}, "shift": {}}
    for key, raw in pairs.items():
        if "." in key:
            section, name = key.split(".", 1)
            if section not in nested:
                raise ValueError(f"unknown config section {section!r} in key {key!r}")
            sub = getattr(cfg, section)
            if name not in {f.name for f in fields(sub)}:
                raise ValueError(f"unknown config key {key!r}")
            nested[section][name] = _coerce(raw, getattr(sub, name))
        else:
            if key not in {f.name for f in fields(cfg)} or key in nested:
                raise ValueError(f"unknown config key {key!r}")
            top[key] = _coerce(raw, getattr(cfg, key))
    cfg = replace(cfg, **top)
    for section, vals in nested.items():
        if vals:
            cfg = replace(cfg, **{section: replace(getattr(cfg, section), **vals)})
    return cfg


def parse_config_text(text):
    pairs = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def load_config(path, base=None):
    with open(path, encoding="utf-8") as fh:
        pairs = parse_config_text(fh.read())
    return apply_overrides(base or ExperimentConfig(), pairs)


# ---------------------------------------------------------------- seeding

def derive_seed(master, name):
    ss = np.random.SeedSequence([int(master), RNG_STREAMS[name]])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def named_rng(master, name):
    return np.random.default_rng(np.random.SeedSequence([int(master), RNG_STREAMS[name]]))


# ---------------------------------------------------------------- training pieces

class MaskBuilder:
    """Per-sample drop masks for one droptop mode."""

    def __init__(self, mode, shift: its.ShiftConfig, rng, kappa_of=None):
        self.mode = mode
        self.shift = shift
        self.rng = rng
        self.kappa_of = kappa_of

    def attention(self, rec):
        f_first, f_last = rec.f_first.data, rec.f_last.data
        if self.mode == "no_fusion":
            return debias.last_only_attention(f_last, f_first.shape[-2:])
        return debias.fuse(f_first, f_last)

    def __call__(self, model, images, labels):
        n = len(labels)
        size = model.config.input_size
        gamma = self.shift.gamma
        if self.mode == "random":
            n_drop = sum(debias.stabilize(0.0, gamma, size, size))
            return np.stack([debias.random_mask((size, size), n_drop, self.rng).values for _ in range(n)]), None
        rec = bb.forward(model, images, track_grad=False)
        att = self.attention(rec)
        masks = np.empty((n, size, size), dtype=np.float32)
        for i in range(n):
            kappa = self.shift.kappa0 if self.mode == "fixed" else self.kappa_of(int(labels[i]))
            n_k, n_r = debias.stabilize(min(kappa, gamma), gamma, size, size)
            if self.mode == "soft":
                masks[i] = debias.soft_mask(att[i], n_k, n_r, self.rng).values
            else:
                masks[i] = debias.hard_mask(att[i], n_k, n_r, self.rng).values
        return masks, att


def class_losses(model, buffer: ReplayBuffer, common=False, batch=256):
    """Mean cross-entropy per class over the replay memory, no masking."""
    mem = buffer.contents()
    if len(mem) == 0:
        return {}
    ce = np.concatenate([
        per_sample_cross_entropy(bb.forward(model, mem.images[s:s + batch], track_grad=False).logits.data,
                                 mem.labels[s:s + batch])
        for s in range(0, len(mem), batch)
    ])
    if common:
        return {-1: float(ce.mean())}
    return {int(c): float(ce[mem.labels == c].mean()) for c in np.unique(mem.labels)}


def accuracy(model, split, batch=256):
    if len(split) == 0:
        return 0.0
    hits = 0
    for s in range(0, len(split), batch):
        logits = bb.forward(model, split.images[s:s + batch], track_grad=False).logits.data
        hits += int((logits.argmax(axis=1) == split.labels[s:s + batch]).sum())
    return hits / len(split)


@dataclass
class Learner:
    """Model, memory and RNG streams of one training run."""

    cfg: ExperimentConfig
    model: bb.Model
    buffer: ReplayBuffer
    retrieval_rng: np.random.Generator
    buffer_rng: np.random.Generator
    masker: MaskBuilder | None = None
    drop_counts: set = field(default_factory=set)
    steps: int = 0
    last_attention: np.ndarray | None = None
    last_masks: np.ndarray | None = None

    def step(self, images, labels, task_id):
        cfg = self.cfg
        n = len(labels)
        parts_x, parts_y = [images], [labels]
        mem = self.buffer.retrieve(cfg.memory_batch_size, self.retrieval_rng)
        mem2 = None
        if len(mem):
            parts_x.append(mem.images)
            parts_y.append(mem.labels)
            if cfg.method == "derpp":
                mem2 = self.buffer.retrieve(cfg.memory_batch_size, self.retrieval_rng)
                parts_x.append(mem2.images)
                parts_y.append(mem2.labels)
        x = np.concatenate(parts_x) if len(parts_x) > 1 else images
        y = np.concatenate(parts_y) if len(parts_y) > 1 else labels

        masks = None
        if self.masker is not None:
            masks, self.last_attention = self.masker(self.model, x, y)
            self.last_masks = masks
            self.drop_counts.update(int(c) for c in (masks < 1).reshape(len(y), -1).sum(axis=1))
        rec = bb.forward(self.model, x, mask=masks)

        if cfg.method == "er" or not len(mem):
            loss = softmax_cross_entropy(rec.logits, y)
        else:
            m1 = len(mem)
            loss = softmax_cross_entropy(slice_rows(rec.logits, 0, n), labels)
            loss = loss + mse(slice_rows(rec.logits, n, n + m1), mem.logits) * cfg.derpp_distill_coef
            loss = loss + softmax_cross_entropy(slice_rows(rec.logits, n + m1, len(y)), mem2.labels) \
                * cfg.derpp_mem_ce_coef
        bb.sgd_step(self.model, loss, cfg.lr)

        stored_logits = rec.logits.data[:n].copy() if cfg.method == "derpp" else None
        self.buffer.update(images, labels, task_id, self.buffer_rng, logits=stored_logits)
        self.steps += 1
        return loss.item()


def _make_learner(cfg, seed, mode, kappa_of=None, model=None):
    model = model if model is not None else bb.build(cfg.backbone_config(derive_seed(seed, "init")))
    masker = None if mode == "off" else MaskBuilder(mode, cfg.shift, named_rng(seed, "mask"), kappa_of)
    return Learner(cfg, model, ReplayBuffer(cfg.memory_capacity, cfg.policy),
                   named_rng(seed, "retrieval"), named_rng(seed, "buffer"), masker)


def _split_names(stream):
    names = ["biased", stream.unbiased_split]
    if stream.config.generator == "patch_background":
        names += [n for n in ("unbiased", "only_bg") if n not in names]
    return names


def _summarise(matrix):
    out = {"matrix": matrix.rows(), "A_avg": metrics.avg_accuracy(matrix)}
    out["F_last"] = metrics.forgetting(matrix) if matrix.num_tasks >= 2 else None
    return out


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _trace_rows(trace):
    return [(r.iteration, r.class_id, r.phase, repr(float(r.kappa)),
             "" if r.p_value is None else repr(float(r.p_value)), r.outcome) for r in trace]


def _diagnostics(model, stream, seed):
    seen = np.concatenate([t.tests["biased"].images for t in stream])
    unseen = novel_class_images(stream.config, len(seen), derive_seed(seed, "data") + 1)
    labels, th = metrics.classify_features(model, seen, unseen)
    sc, ns = metrics.activation_gap(model, seen, labels)
    return {
        "rho": th.rho, "epsilon": th.epsilon,
        "counts": {k: labels.count(k) for k in (metrics.SHORTCUT, metrics.NON_SHORTCUT, metrics.INACTIVE)},
        "mean_shortcut_activation": sc, "mean_nonshortcut_activation": ns,
    }


def _dump_masks(directory, task_id, learner, count=4):
    os.makedirs(directory, exist_ok=True)
    for i in range(min(count, len(learner.last_masks))):
        stem = os.path.join(directory, f"task{task_id}_sample{i}")
        if learner.last_attention is not None:
            debias.to_pgm(learner.last_attention[i], stem + "_attention.pgm")
            debias.to_csv(learner.last_attention[i], stem + "_attention.csv")
        debias.to_pgm(learner.last_masks[i], stem + "_mask.pgm")
        debias.to_csv(learner.last_masks[i], stem + "_mask.csv")


# ---------------------------------------------------------------- one seed

def run_seed(cfg: ExperimentConfig, seed, out_dir=None):
    """Train and evaluate one seed; returns a JSON-serialisable result dict."""
    stream = generate(replace(cfg.stream, seed=derive_seed(seed, "data")))
    shifter = None
    if cfg.droptop in ADAPTIVE_MODES:
        shifter = its.IntensityShifter(cfg.shift, range(cfg.stream.num_classes), common=cfg.common_intensity)
    learner = _make_learner(cfg, seed, cfg.droptop, shifter.kappa if shifter else None)
    names = _split_names(stream)
    mats = {name: metrics.AccuracyMatrix(len(stream)) for name in names}
    curves = []

    for task in stream:
        if shifter is not None:
            shifter.new_task()
        for k, batch in enumerate(task.batches(cfg.batch_size)):
            learner.step(batch.images, batch.labels, task.task_id)
            if cfg.dump_masks and out_dir and k == 0 and learner.last_masks is not None:
                _dump_masks(os.path.join(out_dir, "masks"), task.task_id, learner)
            if shifter is not None and shifter.tick():
                shifter.boundary(class_losses(learner.model, learner.buffer, cfg.common_intensity))
            if cfg.eval_every and learner.steps % cfg.eval_every == 0:
                for j in range(len(stream)):
                    curves.append((learner.steps, task.task_id, j,
                                   accuracy(learner.model, stream.tasks[j].tests["biased"])))
        for j in range(task.task_id + 1):
            for name in names:
                mats[name].set(task.task_id, j, accuracy(learner.model, stream.tasks[j].tests[name]))

    result = {
        "seed": int(seed),
        "steps": learner.steps,
        "splits": {name: _summarise(m) for name, m in mats.items()},
        "unbiased_split": stream.unbiased_split,
        "kappa_endpoints": {str(k): v for k, v in shifter.endpoints().items()} if shifter else {},
        "drop_counts": sorted(learner.drop_counts),
        "diagnostics": _diagnostics(learner.model, stream, seed),
    }
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        rows = [(name, i, j, repr(float(mats[name].a[i, j])))
                for name in names for i in range(len(stream)) for j in range(i + 1)]
        _write_csv(os.path.join(out_dir, "results.csv"), ["split", "after_task", "task", "accuracy"], rows)
        _write_csv(os.path.join(out_dir, "kappa_trace.csv"),
                   ["iteration", "class_id", "phase", "kappa", "p_value", "outcome"],
                   _trace_rows(shifter.trace) if shifter else [])
        learner.buffer.dump_csv(os.path.join(out_dir, "buffer_audit.csv"))
        bb.save_params(learner.model, os.path.join(out_dir, "params.bin"))
        if curves:
            _write_csv(os.path.join(out_dir, "curves.csv"), ["step", "training_task", "eval_task", "accuracy"],
                       [(s, t, j, repr(a)) for s, t, j, a in curves])
        if cfg.droptop != "off":
            last = stream.tasks[-1].tests["biased"]
            rec = bb.forward(learner.model, last.images, track_grad=False)
            metrics.attention_histogram(debias.fuse(rec.f_first.data, rec.f_last.data), last.shortcut_region,
                                        path=os.path.join(out_dir, "attention_hist.csv"))
        with open(os.path.join(out_dir, "summary.json"), "w") as fh:
            json.dump(result, fh, indent=2, sort_keys=True)
    return result


# ---------------------------------------------------------------- aggregate

@dataclass
class RunArtifacts:
    config: ExperimentConfig
    seeds: list
    aggregate: dict
    out_dir: str = ""

    def metric(self, name, split="biased"):
        """Per-seed values of ``A_avg`` / ``F_last`` on a split (``"unbiased"`` resolves per stream)."""
        vals = []
        for r in self.seeds:
            key = r["unbiased_split"] if split == "unbiased" else split
            vals.append(r["splits"][key][name])
        return vals


def _aggregate(results):
    agg = {}
    for key in results[0]["splits"]:
        for name in ("A_avg", "F_last"):
            vals = [r["splits"][key][name] for r in results]
            if any(v is None for v in vals):
                continue
            m, se = metrics.mean_stderr(vals)
            agg[f"{key}.{name}"] = {"mean": m, "stderr": se}
    return agg


def _config_dict(cfg):
    d = asdict(cfg)
    d["policy"] = cfg.policy
    return d


def _check_out_dir(out_dir):
    if not out_dir:
        return
    os.makedirs(out_dir, exist_ok=True)
    if not os.access(out_dir, os.W_OK):
        raise PermissionError(f"output directory {out_dir!r} is not writable")


def _seed_job(args):
    cfg, seed, out = args
    return run_seed(cfg, seed, out)


def run(cfg: ExperimentConfig) -> RunArtifacts:
    """Run every seed of ``cfg`` and write per-seed plus aggregate artifacts."""
    cfg.validate()
    _check_out_dir(cfg.out_dir)
    jobs = [(cfg, s, os.path.join(cfg.out_dir, f"seed_{s}") if cfg.out_dir else None) for s in cfg.seeds]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as ex:
            results = list(ex.map(_seed_job, jobs))
    else:
        results = [_seed_job(j) for j in jobs]
    for r in results:
        log.info("seed %d: %s", r["seed"], {k: v["A_avg"] for k, v in r["splits"].items()})
    agg = _aggregate(results)
    art = RunArtifacts(cfg, results, agg, cfg.out_dir)
    if cfg.out_dir:
        with open(os.path.join(cfg.out_dir, "summary.json"), "w") as fh:
            json.dump({"config": _config_dict(cfg), "aggregate": agg, "seeds": results}, fh, indent=2,
                      sort_keys=True)
        rows = []
        for r in results:
            for split, s in r["splits"].items():
                for i, row in enumerate(s["matrix"]):
                    rows.append([r["seed"], split, i] + [repr(float(v)) for v in row])
        with open(os.path.join(cfg.out_dir, "results.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["seed", "split", "after_task", "accuracies"])
            w.writerows(rows)
    return art


# ---------------------------------------------------------------- sweep

def sweep(base: ExperimentConfig, axis, values):
    """Vary one intensity hyperparameter; returns rows (value, A_avg mean/se, unbiased A_avg mean/se)."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    rows = []
    for v in values:
        shift = replace(base.shift, **{axis: int(v) if axis == "period" else float(v)})
        if axis == "gamma":
            shift = replace(shift, kappa0=min(shift.kappa0, shift.gamma))
        out = os.path.join(base.out_dir, f"{axis}_{v}") if base.out_dir else ""
        art = run(replace(base, shift=shift, out_dir=out))
        a, ase = metrics.mean_stderr(art.metric("A_avg"))
        u, use = metrics.mean_stderr(art.metric("A_avg", "unbiased"))
        rows.append((v, a, ase, u, use))
    if base.out_dir:
        _write_csv(os.path.join(base.out_dir, "sweep.csv"),
                   [axis, "A_avg_mean", "A_avg_stderr", "unbiased_A_avg_mean", "unbiased_A_avg_stderr"],
                   [(v, repr(a), repr(b), repr(c), repr(d)) for v, a, b, c, d in rows])
    return rows


# ---------------------------------------------------------------- reference pair

@dataclass
class AgreementReport:
    per_seed: list = field(default_factory=list)

    @property
    def agreement(self):
        tot = sum(s["tests"] for s in self.per_seed)
        if not tot:
            return None
        return sum(s["agreement"] * s["tests"] for s in self.per_seed if s["tests"]) / tot

    def seed_agreements(self):
        return [s["agreement"] for s in self.per_seed if s["tests"]]


def _pair_seed(cfg: ExperimentConfig, seed):
    stream = generate(replace(cfg.stream, seed=derive_seed(seed, "data")))
    classes = range(cfg.stream.num_classes)
    single = its.IntensityShifter(cfg.shift, classes)
    ref = its.ReferenceShifter(cfg.shift, classes)
    a = _make_learner(cfg, seed, "on", single.kappa)
    d = _make_learner(cfg, seed, "on", ref.kappa_dec, model=a.model.copy())
    i = _make_learner(cfg, seed, "on", ref.kappa_inc, model=a.model.copy())
    for task in stream:
        single.new_task()
        ref.new_task()
        for batch in task.batches(cfg.batch_size):
            for learner in (a, d, i):
                learner.step(batch.images, batch.labels, task.task_id)
            if single.tick():
                single.boundary(class_losses(a.model, a.buffer))
            if ref.tick():
                ref.boundary(class_losses(d.model, d.buffer), class_losses(i.model, i.buffer))
    per_class, tests = its.agreement(single.trace, ref.trace)
    hits = sum(per_class[c] * n for c, n in _test_counts(single.trace, ref.trace).items())
    return {
        "seed": int(seed),
        "per_class": {str(c): v for c, v in per_class.items()},
        "tests": tests,
        "agreement": hits / tests if tests else None,
        "single_trace": _trace_rows(single.trace),
        "reference_trace": _trace_rows(ref.trace),
    }


def _test_counts(single_trace, reference_trace):
    a, b = its.tested_outcomes(single_trace), its.tested_outcomes(reference_trace)
    counts = {}
    for key in set(a) & set(b):
        counts[key[1]] = counts.get(key[1], 0) + 1
    return counts


def run_reference_pair(cfg: ExperimentConfig, seeds=None) -> AgreementReport:
    """Train the single-model and two-model versions on identical data and compare their shifts."""
    seeds = cfg.seeds if seeds is None else seeds
    report = AgreementReport()
    if cfg.stream.num_tasks == 0:
        return report
    cfg = replace(cfg, droptop="on")
    cfg.validate()
    _check_out_dir(cfg.out_dir)
    for s in seeds:
        report.per_seed.append(_pair_seed(cfg, s))
    if cfg.out_dir:
        for r in report.per_seed:
            for name in ("single_trace", "reference_trace"):
                _write_csv(os.path.join(cfg.out_dir, f"seed_{r['seed']}_{name}.csv"),
                           ["iteration", "class_id", "phase", "kappa", "p_value", "outcome"], r[name])
        with open(os.path.join(cfg.out_dir, "agreement.json"), "w") as fh:
            json.dump({"agreement": report.agreement,
                       "per_seed": [{k: v for k, v in r.items() if not k.endswith("_trace")}
                                    for r in report.per_seed]}, fh, indent=2, sort_keys=True)
    return report
