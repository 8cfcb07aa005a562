"""Training, evaluation and ablation loops."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import Adam, Tape, backward
from .checkpoint import Checkpoint, load_checkpoint, load_model_state, model_state, save_checkpoint
from .config import ABLATION_ROWS, RunConfig, ablation_config
from .data import PhantomSpec, augment, generate_phantom, load_case, read_manifest, write_volume
from .losses import LossBundle, schedule_total, softmax_dice_loss
from .metrics import aggregate_cases, case_scores, confidence_histogram, cross_val_aggregate, dice
from .network import CGAUNet, build_cga_unet
from .sam import attention_supervision_loss, channels_to_labels, inter_class_loss, make_category_guided_map, onehot
from .tensor import NumericError

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    """A loss or activation became NaN/inf; the message names the first offender."""


@dataclass
class Case:
    case_id: str
    image: np.ndarray
    labels: np.ndarray
    fold: int


def phantom_cases(cfg: RunConfig) -> list[Case]:
    """In-memory phantoms with the same seeding and fold assignment as ``write_dataset``."""
    base = cfg.phantom_spec()
    rng = np.random.default_rng(cfg.phantom_seed)
    order = rng.permutation(cfg.n_cases)
    fold_of = {int(c): int(i % cfg.folds) for i, c in enumerate(order)}
    cases = []
    for i in range(cfg.n_cases):
        spec = PhantomSpec(**{**dataclasses.asdict(base), "seed": int(base.seed * 100003 + i)})
        image, labels = generate_phantom(spec)
        cases.append(Case(f"{i:03d}", image, labels, fold_of[i]))
    return cases


def dataset_cases(root) -> list[Case]:
    manifest = read_manifest(root)
    cases = []
    for entry in manifest["cases"]:
        image, labels = load_case(root, entry["id"])
        cases.append(Case(entry["id"], image, labels, int(entry["fold"])))
    return cases


def load_cases(cfg: RunConfig) -> list[Case]:
    return dataset_cases(cfg.data_dir) if cfg.data_dir else phantom_cases(cfg)


def split(cases: Sequence[Case], val_fold: int) -> tuple[list[Case], list[Case]]:
    train = [c for c in cases if c.fold != val_fold]
    val = [c for c in cases if c.fold == val_fold]
    return train, val


# -- inference -------------------------------------------------------------------

def predict(model: CGAUNet, image: np.ndarray):
    """Eval-mode forward pass on one ``(C, D, H, W)`` volume, without a tape."""
    was_training = model.training
    model.eval()
    try:
        res = model(image[None].astype(np.float32))
    finally:
        model.train(was_training)
    return res


def predict_labels(model: CGAUNet, image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    res = predict(model, image)
    probs = res.probs.value[0]
    return channels_to_labels(np.argmax(probs, axis=0)), probs


def quick_dice(model: CGAUNet, cases: Sequence[Case]) -> dict[str, float]:
    """Mean Dice per foreground class and region; no Hausdorff (cheap enough for every epoch)."""
    from .metrics import region_dice

    rows = []
    for c in cases:
        pred, _ = predict_labels(model, c.image)
        row = {f"dice_class{l}": dice(pred == l, c.labels == l) for l in (1, 2, 4)}
        row["dice_fg_mean"] = float(np.mean(list(row.values())))
        for region in ("ET", "WT", "TC"):
            row[f"dice_{region}"] = region_dice(pred, c.labels, region)
        rows.append(row)
    return {k: float(np.mean([r[k] for r in rows])) for k in rows[0]} if rows else {}


def evaluate(model: CGAUNet, cases: Sequence[Case], dump_dir=None) -> dict:
    """Per-case and aggregate scores plus the confidence histogram of all predicted probabilities."""
    per_case = {}
    counts = np.zeros(4)
    total = 0
    for c in cases:
        res = predict(model, c.image)
        probs = res.probs.value[0]
        pred = channels_to_labels(np.argmax(probs, axis=0))
        per_case[c.case_id] = case_scores(pred, c.labels)
        hist = confidence_histogram(probs)
        counts += hist * probs.size
        total += probs.size
        if dump_dir is not None:
            dump_heatmaps(Path(dump_dir) / f"case_{c.case_id}", res, pred)
    return {
        "cases": per_case,
        "aggregate": aggregate_cases(list(per_case.values())),
        "confidence_bins": (counts / max(total, 1)).tolist(),
    }


def dump_heatmaps(directory: Path, res, pred_labels: np.ndarray) -> None:
    """Write attention maps and bottleneck features before/after the update as volume files."""
    directory.mkdir(parents=True, exist_ok=True)
    write_volume(directory / "prediction.cgav", pred_labels.astype(np.uint8))
    write_volume(directory / "probabilities.cgav", res.probs.value[0].astype(np.float32))
    if res.sam is not None:
        write_volume(directory / "attention.cgav", res.sam.attention.value[0].astype(np.float32))
        write_volume(directory / "features_before.cgav", res.sam.features_before.value[0].astype(np.float32))
        write_volume(directory / "features_after.cgav", res.sam.features_after.value[0].astype(np.float32))


# -- training --------------------------------------------------------------------

@dataclass
class TrainResult:
    model: CGAUNet
    optimizer: Adam
    history: list[dict] = field(default_factory=list)
    attention_curve: list[float] = field(default_factory=list)
    config: RunConfig | None = None


def _check_finite(named: dict) -> None:
    for name, v in named.items():
        if v is None:
            continue
        arr = v.value if hasattr(v, "value") else np.asarray(v)
        if not np.all(np.isfinite(arr)):
            raise TrainingDiverged(f"non-finite values in {name}")


def step_losses(model: CGAUNet, x: np.ndarray, labels: np.ndarray, cfg: RunConfig, epoch: int):
    """Forward pass plus the loss bundle for one batch (must run under an active tape)."""
    res = model(x)
    _check_finite({"probabilities": res.probs})
    L_M = softmax_dice_loss(res.probs, onehot(labels))
    L_A = L_I = None
    if res.sam is not None:
        S = res.sam.attention
        rate = labels.shape[-1] // S.shape[-1]
        G = make_category_guided_map(labels, rate)
        L_A = attention_supervision_loss(S, G)
        if res.sam.distance is not None:
            L_I = inter_class_loss(res.sam.distance, cfg.inter_sign)
    _check_finite({"L_M": L_M, "L_A": L_A, "L_I": L_I})
    bundle = LossBundle(L_M, L_A, L_I, epoch, cfg.w_main, cfg.w_attention, cfg.w_inter, cfg.switch_epoch)
    return res, bundle


def train(cfg: RunConfig, cases: Sequence[Case] | None = None, val_cases: Sequence[Case] | None = None,
          out_dir=None, on_epoch: Callable[[dict], None] | None = None,
          validate: bool = True) -> TrainResult:
    """Train a model per ``cfg``; returns the model, optimizer and per-epoch history.

    When ``cases`` is given without ``val_cases``, they are split by fold.
    """
    if cases is None:
        cases = load_cases(cfg)
    if val_cases is None:
        cases, val_cases = split(cases, cfg.val_fold)
    if not cases:
        raise ValueError("no training cases")
    model = build_cga_unet(cfg.network_spec(), seed=cfg.seed, sam=cfg.sam_config())
    model.reseed_dropout([cfg.seed, 1])
    params = model.named_parameters()
    opt = Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 2])
    result = TrainResult(model, opt, config=cfg)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train_log.jsonl", "w")
    else:
        log_fh = None
    try:
        for epoch in range(cfg.epochs):
            model.train()
            order = rng.permutation(len(cases))
            sums = {"L_M": 0.0, "L_A": 0.0, "L_I": 0.0, "total": 0.0}
            n_steps = 0
            for start in range(0, len(order), cfg.batch_size):
                batch = [cases[i] for i in order[start:start + cfg.batch_size]]
                imgs, labs = [], []
                for c in batch:
                    im, lb = augment(c.image, c.labels, rng, crop=cfg.crop)
                    imgs.append(im)
                    labs.append(lb)
                x = np.stack(imgs)
                y = np.stack(labs)
                where = f"epoch {epoch}, cases {[c.case_id for c in batch]}"
                opt.zero_grad()
                try:
                    _check_finite({"input batch": x})
                    with Tape():
                        _, bundle = step_losses(model, x, y, cfg, epoch)
                        total = schedule_total(bundle)
                    backward(total)
                except (TrainingDiverged, NumericError) as exc:
                    raise TrainingDiverged(f"{where}: {exc}") from exc
                try:
                    opt.step()
                except FloatingPointError as exc:
                    raise TrainingDiverged(str(exc)) from exc
                n_steps += 1
                sums["L_M"] += float(bundle.main.value)
                sums["total"] += float(total.value)
                if bundle.attention is not None:
                    la = float(bundle.attention.value)
                    sums["L_A"] += la
                    result.attention_curve.append(la)
                if bundle.inter is not None:
                    sums["L_I"] += float(bundle.inter.value)
            record = {"epoch": epoch, **{k: v / max(n_steps, 1) for k, v in sums.items()}}
            record["inter_active"] = bool(epoch >= cfg.switch_epoch and cfg.sam_enabled and cfg.inter_enabled)
            if validate and val_cases:
                record.update({f"val_{k}": v for k, v in quick_dice(model, val_cases).items()})
            result.history.append(record)
            log.info("epoch %d: %s", epoch, record)
            if log_fh is not None:
                log_fh.write(json.dumps(record, sort_keys=True) + "\n")
                log_fh.flush()
            if on_epoch is not None:
                on_epoch(record)
            last = epoch == cfg.epochs - 1
            if out is not None and (last or (cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0)):
                save_run_checkpoint(out / "checkpoint.ckpt", result, epoch + 1, record)
        if out is not None and result.attention_curve:
            with open(out / "attention_loss.csv", "w") as fh:
                fh.write("step,attention_loss\n")
                for i, v in enumerate(result.attention_curve):
                    fh.write(f"{i},{v!r}\n")
    finally:
        if log_fh is not None:
            log_fh.close()
    return result


def save_run_checkpoint(path, result: TrainResult, epoch: int, record: dict | None = None) -> None:
    params, buffers = model_state(result.model)
    meta = {"config": result.config.to_flat() if result.config else {}}
    if record is not None:
        meta["last_epoch"] = record
    save_checkpoint(path, Checkpoint(params, buffers, result.optimizer.state_dict(), epoch,
                                     result.config.seed if result.config else 0, meta))


def model_from_checkpoint(path) -> tuple[CGAUNet, Checkpoint, RunConfig]:
    ckpt = load_checkpoint(path)
    cfg = RunConfig.from_flat(ckpt.meta.get("config", {}))
    model = build_cga_unet(cfg.network_spec(), seed=cfg.seed, sam=cfg.sam_config())
    load_model_state(model, ckpt)
    return model, ckpt, cfg


# -- ablation --------------------------------------------------------------------

ABLATION_COLUMNS = ("dice_ET", "dice_WT", "dice_TC", "hd100_ET", "hd100_WT", "hd100_TC")


def run_ablation(cfg: RunConfig, rows: Sequence[str] | None = None, cases: Sequence[Case] | None = None,
                 seeds: Sequence[int] | None = None, folds: Sequence[int] | None = None,
                 progress: Callable[[str], None] | None = None) -> dict:
    """Train and score every ablation row.

    Repetitions are either folds (cross-validation; the default) or seeds on
    the fixed ``cfg.val_fold`` split. Returns, per row, the per-repetition
    aggregates and their mean/std-dev summary.
    """
    rows = list(rows) if rows is not None else list(ABLATION_ROWS)
    cases = list(cases) if cases is not None else load_cases(cfg)
    if seeds is not None:
        reps = [("seed", s) for s in seeds]
    else:
        reps = [("fold", f) for f in (folds if folds is not None else range(cfg.folds))]
    out: dict[str, dict] = {}
    for row in rows:
        rcfg = ablation_config(cfg, row)
        per_rep = []
        for kind, value in reps:
            run_cfg = rcfg.replace(seed=value) if kind == "seed" else rcfg.replace(val_fold=value)
            train_cases, val_cases = split(cases, run_cfg.val_fold)
            res = train(run_cfg, train_cases, val_cases, validate=False)
            scores = evaluate(res.model, val_cases)["aggregate"]
            scores[kind] = value
            per_rep.append(scores)
            if progress is not None:
                progress(f"{row} [{kind} {value}]: dice_fg_mean={scores['dice_fg_mean']:.4f}")
        keys = [k for k in per_rep[0] if k != "seed" and k != "fold" and not k.endswith("_failures")]
        summary = cross_val_aggregate([{k: r.get(k, math.inf) for k in keys} for r in per_rep]) \
            if len(per_rep) >= 2 else {k: {"mean": per_rep[0][k], "std": 0.0} for k in keys}
        out[row] = {"runs": per_rep, "summary": summary}
    return out


def format_ablation_table(results: dict) -> str:
    head = f"{'Method':<28s}" + "".join(f"{c:>18s}" for c in ABLATION_COLUMNS)
    lines = [head, "-" * len(head)]
    for row, res in results.items():
        cells = []
        for col in ABLATION_COLUMNS:
            s = res["summary"].get(col, {"mean": math.nan, "std": math.nan})
            cells.append(f"{s['mean']:>10.4f} ±{s['std']:<6.3f}")
        lines.append(f"{row:<28s}" + "".join(f"{c:>18s}" for c in cells))
    return "\n".join(lines)
