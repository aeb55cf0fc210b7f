"""Composite uncertainty-weighted loss, optimizer loop with checkpoint selection, ablation runner."""

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import kernels
from . import tensor as T
from .dataset import SyntheticCityConfig, assemble_batch, band_stats, generate_city
from .evalkit import format_metrics_table, metrics
from .geosplit import centers_by_subset, geosplit_city
from .model import ModelConfig, MorphoFormer, desk_config, save_checkpoint

log = logging.getLogger(__name__)

VARIANTS = ("full", "no_bgtd", "no_mcl")
VARIANT_FLAGS = {"full": {}, "no_bgtd": {"ablate_bgtd": True}, "no_mcl": {"ablate_mcl_head": True}}
VARIANT_LABELS = {"full": "full", "no_bgtd": "w/o BGTD", "no_mcl": "w/o MCL"}


class TrainingDivergedError(RuntimeError):
    pass


def _from_dict(cls, d):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)


@dataclass
class LossConfig:
    beta_h: float = 2.0
    beta_f: float = 0.05
    lambda_c_max: float = 0.2
    warmup_epochs: int = 10
    log_var_h_init: float = 0.0
    log_var_f_init: float = 0.0
    warmup_inclusive: bool = False
    # start each log-variance at the log loss of a constant mean predictor on the training labels
    calibrate_log_vars: bool = False

    def validate(self):
        if self.beta_h <= 0 or self.beta_f <= 0:
            raise ValueError("Huber thresholds must be positive")
        if self.lambda_c_max < 0 or self.warmup_epochs < 0:
            raise ValueError("lambda_c_max and warmup_epochs must be >= 0")
        return self

    @classmethod
    def from_dict(cls, d):
        return _from_dict(cls, d)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 40
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 5.0  # 0 disables clipping
    samples_per_epoch: int = 0  # 0 means the whole training set every epoch
    max_val_samples: int = 0  # 0 means the whole validation set

    def validate(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.batch_size <= 0 or self.epochs <= 0:
            raise ValueError("batch_size and epochs must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0:
            raise ValueError("invalid optimizer moments")
        if self.clip_norm < 0 or self.samples_per_epoch < 0 or self.max_val_samples < 0:
            raise ValueError("clip_norm, samples_per_epoch and max_val_samples must be >= 0")
        return self

    @classmethod
    def from_dict(cls, d):
        return _from_dict(cls, d)


def consistency_weight(epoch, cfg=None):
    cfg = cfg or LossConfig()
    t = max(epoch + (1 if cfg.warmup_inclusive else 0), 0)
    if cfg.warmup_epochs == 0:
        return cfg.lambda_c_max
    return cfg.lambda_c_max * min(t / cfg.warmup_epochs, 1.0)


def calibrated_log_vars(y, cfg=None):
    """(log_var_h, log_var_f) equal to the log Huber loss of predicting the training mean."""
    cfg = cfg or LossConfig()
    y = np.asarray(y, dtype=np.float64)
    l_h = kernels.huber_fwd(y[:, 1] - y[:, 1].mean(), cfg.beta_h)
    l_f = kernels.huber_fwd(y[:, 0] - y[:, 0].mean(), cfg.beta_f)
    return math.log(max(l_h, 1e-12)), math.log(max(l_f, 1e-12))


def total_loss(out, target, log_var_h, log_var_f, lambda_c, cfg=None):
    """Uncertainty-weighted BH + BF Huber terms plus the consistency term.

    ``target`` is (n, 2) with columns (lambda_p, H). Returns the scalar loss
    tensor and a dict of float components.
    """
    cfg = cfg or LossConfig()
    if lambda_c < 0:
        raise ValueError("lambda_c must be >= 0")
    target = np.asarray(target, dtype=np.float64)
    lam_t, h_t = target[:, 0], target[:, 1]
    l_bh = T.huber(out.h_pred, h_t, cfg.beta_h)
    l_bf = T.huber(out.lambda_pred, lam_t, cfg.beta_f)
    log_var_h = T.as_tensor(log_var_h)
    log_var_f = T.as_tensor(log_var_f)
    loss = T.add(T.scale(T.mul(T.exp(T.scale(log_var_h, -1.0)), l_bh), 0.5), T.scale(log_var_h, 0.5))
    loss = T.add(loss, T.add(T.scale(T.mul(T.exp(T.scale(log_var_f, -1.0)), l_bf), 0.5), T.scale(log_var_f, 0.5)))
    l_mcl = None
    if out.h_from_bf is not None:
        l_mcl = T.huber(out.h_from_bf, h_t, cfg.beta_h)
        if lambda_c > 0:
            loss = T.add(loss, T.scale(l_mcl, lambda_c))
    parts = {"total": float(loss.data), "bh": float(l_bh.data), "bf": float(l_bf.data),
             "mcl": None if l_mcl is None else float(l_mcl.data)}
    return loss, parts


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads):
        """``grads`` is a list aligned with ``params`` (None for no gradient)."""
        self.t += 1
        if self.lr == 0:
            return
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_global_norm(grads, max_norm):
    """Scale gradients in place so their joint L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads if g is not None))
    if max_norm > 0 and norm > max_norm:
        s = max_norm / (norm + 1e-12)
        for g in grads:
            if g is not None:
                g *= s
    return norm


class SceneSource:
    """Scenes assembled on demand from city rasters for a fixed list of centres."""

    def __init__(self, cities, centers, stats):
        self.cities = list(cities)
        self.stats = stats
        idx = [np.column_stack([np.full(len(c), k, dtype=np.int64), np.asarray(c, dtype=np.int64).reshape(-1, 2)])
               for k, c in enumerate(centers)]
        self.index = np.concatenate(idx) if idx else np.zeros((0, 3), dtype=np.int64)

    def __len__(self):
        return len(self.index)

    def subset(self, rows):
        out = SceneSource.__new__(SceneSource)
        out.cities, out.stats = self.cities, self.stats
        out.index = self.index[np.asarray(rows, dtype=np.int64)]
        return out

    def labels(self):
        y = np.zeros((len(self), 2))
        for k, (table, _) in enumerate(self.cities):
            sel = self.index[:, 0] == k
            rc = self.index[sel, 1:]
            y[sel, 0] = table.lambda_p[rc[:, 0], rc[:, 1]]
            y[sel, 1] = table.h_ave[rc[:, 0], rc[:, 1]]
        return y

    def batch(self, rows):
        sel = self.index[np.asarray(rows, dtype=np.int64)]
        x = None
        y = np.zeros((len(sel), 2))
        for k in np.unique(sel[:, 0]):
            pos = np.flatnonzero(sel[:, 0] == k)
            table, rasters = self.cities[k]
            xb, yb = assemble_batch(table, rasters, sel[pos, 1:], self.stats)
            if x is None:
                x = np.zeros((len(sel),) + xb.shape[1:])
            x[pos] = xb
            y[pos] = yb
        return x, y

    def batches(self, batch_size, order=None):
        order = np.arange(len(self)) if order is None else order
        for i in range(0, len(order), batch_size):
            rows = order[i:i + batch_size]
            yield rows, self.batch(rows)


def predict(model, source, batch_size=64):
    keys = ("h_pred", "lambda_pred", "h_from_bf", "gate")
    chunks = {k: [] for k in keys}
    for _, (x, _) in source.batches(batch_size):
        out = model.forward(x)
        for k in keys:
            val = getattr(out, k)
            if val is not None:
                chunks[k].append(val.data)
    return {k: np.concatenate(v) if v else None for k, v in chunks.items()}


def combined_mae(pred, y, cfg=None):
    cfg = cfg or LossConfig()
    mae_h = float(np.mean(np.abs(pred["h_pred"] - y[:, 1])))
    mae_f = float(np.mean(np.abs(pred["lambda_pred"] - y[:, 0])))
    return mae_h, mae_f, mae_h / cfg.beta_h + mae_f / cfg.beta_f


def evaluate_val(model, source, cfg=None, batch_size=64):
    return combined_mae(predict(model, source, batch_size), source.labels(), cfg)


@dataclass
class TrainResult:
    best_epoch: int
    best_combined: float
    log: list
    best_state: dict = field(repr=False, default=None)
    seconds: float = 0.0


def _val_subset(source, n, seed):
    if n and n < len(source):
        rows = np.sort(np.random.default_rng(seed).permutation(len(source))[:n])
        return source.subset(rows)
    return source


def train(model, train_src, val_src, tcfg=None, loss_cfg=None, log_path=None, ckpt_path=None, ckpt_meta=None):
    """Train ``model`` in place and restore the weights of the best validation epoch."""
    tcfg = (tcfg or TrainConfig()).validate()
    loss_cfg = (loss_cfg or LossConfig()).validate()
    if len(train_src) == 0 or len(val_src) == 0:
        raise ValueError("training and validation sets must be nonempty")
    params = model.trainable()
    lv_h = model.params["loss.log_var_h"]
    lv_f = model.params["loss.log_var_f"]
    if loss_cfg.calibrate_log_vars:
        lv_h.data[...], lv_f.data[...] = calibrated_log_vars(train_src.labels(), loss_cfg)
    else:
        lv_h.data[...] = loss_cfg.log_var_h_init
        lv_f.data[...] = loss_cfg.log_var_f_init
    opt = Adam(params, tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.eps)
    shuffle = np.random.default_rng(tcfg.seed + 3)
    val = _val_subset(val_src, tcfg.max_val_samples, tcfg.seed + 4)
    use_mcl = not model.cfg.ablate_mcl_head
    log_f = open(log_path, "w", encoding="utf-8") if log_path else None
    records = []
    best = (math.inf, -1, None)
    t0 = time.perf_counter()
    try:
        for epoch in range(tcfg.epochs):
            lam_c = consistency_weight(epoch, loss_cfg) if use_mcl else 0.0
            order = shuffle.permutation(len(train_src))
            if tcfg.samples_per_epoch:
                order = order[:tcfg.samples_per_epoch]
            sums = {"total": 0.0, "bh": 0.0, "bf": 0.0, "mcl": 0.0}
            seen = 0
            for b, (rows, (x, y)) in enumerate(train_src.batches(tcfg.batch_size, order)):
                with T.Tape() as tape:
                    out = model.forward(x)
                    loss, parts = total_loss(out, y, lv_h, lv_f, lam_c, loss_cfg)
                if not all(v is None or math.isfinite(v) for v in parts.values()):
                    raise TrainingDivergedError(f"non-finite loss at epoch {epoch} batch {b}: {parts}")
                gmap = T.backward(tape, loss)
                for p in params:
                    p.grad = None
                grads = [gmap.get(p) for p in params]
                clip_global_norm(grads, tcfg.clip_norm)
                opt.step(grads)
                n = len(rows)
                seen += n
                for k in sums:
                    sums[k] += (parts[k] or 0.0) * n
            mae_h, mae_f, comb = evaluate_val(model, val, loss_cfg, tcfg.batch_size)
            rec = {"epoch": epoch, "lambda_c": lam_c,
                   "train": {k: v / seen for k, v in sums.items()},
                   "val_mae_bh": mae_h, "val_mae_bf": mae_f, "combined": comb,
                   "log_var_h": float(lv_h.data), "log_var_f": float(lv_f.data)}
            if not use_mcl:
                rec["train"]["mcl"] = None
            records.append(rec)
            if log_f:
                log_f.write(json.dumps(rec, sort_keys=True) + "\n")
                log_f.flush()
            log.info("epoch %d combined %.4f (bh %.3f, bf %.4f)", epoch, comb, mae_h, mae_f)
            if comb < best[0]:
                best = (comb, epoch, model.state())
    finally:
        if log_f:
            log_f.close()
    model.load_state(best[2])
    if ckpt_path:
        meta = {"epoch": best[1], "val_combined": best[0], "train": asdict(tcfg), "loss": asdict(loss_cfg)}
        meta.update(ckpt_meta or {})
        save_checkpoint(model, ckpt_path, meta)
    return TrainResult(best[1], best[0], records, best[2], time.perf_counter() - t0)


# ---------------------------------------------------------------- synthetic data + splits

@dataclass
class DataConfig:
    n_cities: int = 4
    grid_size: int = 120
    r0: float = 19.0
    coupling: float = 8.0

    @classmethod
    def from_dict(cls, d):
        return _from_dict(cls, d)


ABLATION_DATA = DataConfig(n_cities=4, grid_size=90, r0=14.0)


def city_configs(data_cfg, seed):
    """One generator config per city; city k draws from sub-seed ``seed * 1000 + k``."""
    return [SyntheticCityConfig(city_id=f"city{k:02d}", grid_size=data_cfg.grid_size, r0=data_cfg.r0,
                                coupling=data_cfg.coupling, seed=seed * 1000 + k)
            for k in range(data_cfg.n_cities)]


def make_cities(data_cfg, seed):
    return [generate_city(c)[:2] for c in city_configs(data_cfg, seed)]


@dataclass
class PreparedData:
    cities: list
    splits: list
    train: SceneSource
    val: SceneSource
    test: SceneSource


def prepare(cities, rotate=0.0):
    """Split every city by sector and build normalised scene sources for the three subsets."""
    splits = [geosplit_city(table, rotate) for table, _ in cities]
    by = [centers_by_subset(s.subset_grid) for s in splits]
    stats = band_stats(cities, [b["train"] for b in by])
    src = {name: SceneSource(cities, [b[name] for b in by], stats) for name in ("train", "val", "test")}
    return PreparedData(cities, splits, src["train"], src["val"], src["test"])


# ---------------------------------------------------------------- ablation suite

def ablation_model_config(**overrides):
    """Desk-scale encoder for the ablation suite: one token per cell at width 48."""
    base = dict(d0=48, d=24)
    base.update(overrides)
    return desk_config(**base)


ABLATION_TRAIN = TrainConfig(epochs=12, samples_per_epoch=2560, max_val_samples=1024)
ABLATION_LOSS = LossConfig(calibrate_log_vars=True)


@dataclass
class AblationResult:
    per_run: list
    median: dict
    seeds: tuple

    def table(self):
        rows = [(VARIANT_LABELS[v], self.median[v]["bh"], self.median[v]["bf"]) for v in VARIANTS if v in self.median]
        return format_metrics_table(rows)

    def to_dict(self):
        return {"seeds": list(self.seeds), "median": {v: {k: asdict(m) for k, m in d.items()}
                                                       for v, d in self.median.items()},
                "runs": self.per_run}


def _median_metricset(sets):
    from .evalkit import MetricSet
    vals = {}
    for f in ("rmse", "mae", "me", "cc", "r2"):
        xs = [getattr(s, f) for s in sets if getattr(s, f) is not None]
        vals[f] = float(np.median(xs)) if xs else None
    return MetricSet(n=sets[0].n, **vals)


def run_ablation_suite(data, model_cfg=None, tcfg=None, loss_cfg=None, seeds=(0, 1, 2), variants=VARIANTS,
                       out_dir=None, keep_predictions=False):
    """Train each variant for each seed on the same split; report median test metrics."""
    if len(seeds) < 3:
        raise ValueError("the ablation suite needs at least three seeds")
    model_cfg = model_cfg or ablation_model_config()
    tcfg = tcfg or ABLATION_TRAIN
    loss_cfg = loss_cfg or ABLATION_LOSS
    y_test = data.test.labels()
    runs = []
    collected = {v: {"bh": [], "bf": []} for v in variants}
    for seed in seeds:
        for v in variants:
            cfg = ModelConfig(**{**model_cfg.to_dict(), **VARIANT_FLAGS[v]})
            model = MorphoFormer(cfg, seed=seed + 2)
            run_cfg = TrainConfig(**{**asdict(tcfg), "seed": seed})
            stem = f"{out_dir}/{v}_seed{seed}" if out_dir else None
            res = train(model, data.train, data.val, run_cfg, loss_cfg,
                        log_path=stem and stem + ".jsonl", ckpt_path=stem and stem + ".ckpt")
            pred = predict(model, data.test, run_cfg.batch_size)
            bh = metrics(pred["h_pred"], y_test[:, 1])
            bf = metrics(pred["lambda_pred"], y_test[:, 0])
            collected[v]["bh"].append(bh)
            collected[v]["bf"].append(bf)
            run = {"variant": v, "seed": seed, "best_epoch": res.best_epoch, "val_combined": res.best_combined,
                   "params": model.count(), "bh": asdict(bh), "bf": asdict(bf)}
            if keep_predictions:
                run["pred"] = pred
            runs.append(run)
            log.info("%s seed %d: BH RMSE %.3f BF R2 %.4f (%.0fs)", v, seed, bh.rmse, bf.r2 or float("nan"), res.seconds)
    median = {v: {k: _median_metricset(ms) for k, ms in d.items()} for v, d in collected.items()}
    return AblationResult(runs, median, tuple(seeds))
