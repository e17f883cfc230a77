"""Faithfulness evaluation protocols for saliency maps.

Four desk-scale protocols, all driven by one dataset directory
(images plus a ``labels.csv``) and one weight file:

* **salient-pixel removal** — erase the top-ranked pixels at a grid of
  ratios and track the average probability drop (APD) of the
  originally predicted class;
* **minor-pixel removal** — erase the *least* important pixels (by
  absolute value) and confirm the prediction barely moves;
* **logit-delta tables** — subtract one intensity step (0-255 scale)
  inside the positive- or negative-evidence region and track the sign
  and size of the logit change;
* **attack guidance** — generate I-FGSM perturbations, spatially gate
  them by a saliency ranking, and measure how much attack success the
  retained region preserves.

Every protocol is deterministic for a fixed seed: results reduce in
dataset order regardless of worker count.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

from . import chain as ch
from . import grad as gd
from . import model as md
from . import saliency as sal
from .errors import FormatError
from .imageio import read_image
from .tensor import F64, Tensor

SALIENT = "salient"
MINOR = "minor"
POS_REGION = "pos_region"
NEG_REGION = "neg_region"

PIXEL_MAX = 255.0

# Attack defaults: the protocol is defined on the 0-255 scale with an
# L-infinity budget of 50, step 7, 10 iterations.
ATTACK_LINF = 50.0
ATTACK_STEP = 7.0
ATTACK_ITERS = 10

_KNOWN_METHODS = (
    sal.PANE_POS,
    sal.PANE_NEG,
    sal.PANE_SUM,
    sal.VBP,
    sal.GUIDED_BP,
    sal.GRADCAM,
    sal.RANDOM,
)


# --------------------------------------------------------------------------
# Configuration and dataset plumbing
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalConfig:
    """Shared knobs for the evaluation protocols.

    `ratios` must be ascending and within [0, 1]; a literal 0 entry is
    allowed only because removal at ratio 0 is the identity (its APD is
    exactly 0) — ranking itself never runs at ratio 0.
    """

    dataset: str
    model: str
    methods: tuple = (sal.PANE_POS,)
    ratios: tuple = (0.01,)
    fill: float = 0.0
    scale: float = PIXEL_MAX
    seed: int = 0
    jobs: int = 1
    limit: int = 0  # 0 = use every dataset row

    def __post_init__(self):
        if not self.methods:
            raise ValueError("at least one method is required")
        for m in self.methods:
            if m not in _KNOWN_METHODS:
                raise ValueError(f"unknown saliency method {m!r}")
        if not self.ratios:
            raise ValueError("at least one ratio is required")
        prev = -1.0
        for r in self.ratios:
            if not (0.0 <= r <= 1.0):
                raise ValueError(f"ratio {r} outside [0, 1]")
            if r <= prev:
                raise ValueError("ratios must be strictly ascending")
            prev = r
        if not (self.scale > 0.0):
            raise ValueError(f"pixel scale must be positive, got {self.scale}")
        if not (0.0 <= self.fill <= self.scale):
            raise ValueError(f"fill value {self.fill} outside pixel range [0, {self.scale}]")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")
        if self.limit < 0:
            raise ValueError("limit must be >= 0")


@dataclass(frozen=True)
class DatasetItem:
    name: str
    image: Tensor
    label: int


def load_dataset(path: str, limit: int = 0) -> list:
    """Read `<path>/labels.csv` (columns: filename,label) and its images.

    Rows keep file order; an optional header row is skipped.  Images are
    loaded at 0-255 scale in [C, H, W] layout.
    """
    labels_path = os.path.join(path, "labels.csv")
    if not os.path.exists(labels_path):
        raise FormatError(f"dataset is missing labels.csv under {path!r}")
    items: list = []
    with open(labels_path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 2:
                raise FormatError(f"labels.csv row must be filename,label: {row!r}")
            name, label_text = row[0].strip(), row[1].strip()
            if not label_text.lstrip("-").isdigit():
                if not items and label_text.lower() == "label":
                    continue  # header row
                raise FormatError(f"non-integer label {label_text!r} for {name!r}")
            image = read_image(os.path.join(path, name))
            items.append(DatasetItem(name, image, int(label_text)))
            if limit and len(items) >= limit:
                break
    if not items:
        raise FormatError(f"dataset under {path!r} has no labeled images")
    return items


def _load_inputs(cfg: EvalConfig):
    model = md.load_model_file(cfg.model)
    items = load_dataset(cfg.dataset, cfg.limit)
    for item in items:
        if item.image.shape != model.input_shape:
            raise FormatError(
                f"image {item.name!r} has shape {item.image.shape}, "
                f"model expects {model.input_shape}"
            )
    return model, items


# --------------------------------------------------------------------------
# Shared per-image machinery
# --------------------------------------------------------------------------


def top1(logits: Tensor) -> int:
    """Index of the largest logit; ties go to the first index."""
    best = 0
    best_v = logits.data[0]
    for i in range(1, len(logits.data)):
        if logits.data[i] > best_v:
            best, best_v = i, logits.data[i]
    return best


_top1 = top1


def _image_seed(base_seed: int, index: int) -> int:
    # Distinct deterministic stream per image for the random baseline.
    return base_seed * 1_000_003 + index


def _method_bundle(model, trace, k, method, seed, pair):
    """Build one method's map, reusing an excitation pair across variants."""
    if method in (sal.PANE_POS, sal.PANE_NEG, sal.PANE_SUM):
        if pair is None:
            pair = ch.pane_explain(model, trace, k)
        variant = {sal.PANE_POS: "pos", sal.PANE_NEG: "neg", sal.PANE_SUM: "sum"}[method]
        return sal.assemble_pane(pair, variant), pair
    if method == sal.GRADCAM:
        return sal.gradcam(model, trace, k), pair
    return sal.baseline_map(model, trace, k, method, seed=seed), pair


def remove_pixels(image: Tensor, positions, fill: float) -> Tensor:
    """Set every channel at each (row, col) position to `fill`.

    Duplicate positions are idempotent; out-of-range positions are errors.
    """
    if len(image.shape) != 3:
        raise ValueError(f"image must be [C, H, W], got shape {image.shape}")
    c, h, w = image.shape
    data = list(image.data)
    plane = h * w
    for row, col in positions:
        if not (0 <= row < h and 0 <= col < w):
            raise ValueError(f"pixel ({row}, {col}) outside {h}x{w} image")
        base = row * w + col
        for cc in range(c):
            data[cc * plane + base] = fill
    return Tensor(image.shape, data, F64)


def _pearson(xs, ys):
    n = len(xs)
    if n < 2 or n != len(ys):
        return None
    mx = sum(xs) / n
    my = sum(ys) / n
    sxx = sum((x - mx) ** 2 for x in xs)
    syy = sum((y - my) ** 2 for y in ys)
    if sxx == 0.0 or syy == 0.0:
        return None
    sxy = sum((x - mx) * (y - my) for x, y in zip(xs, ys))
    return sxy / math.sqrt(sxx * syy)


def _map_images(worker, payloads, jobs):
    """Apply `worker` to each payload, preserving payload order."""
    if jobs <= 1 or len(payloads) <= 1:
        return [worker(p) for p in payloads]
    chunk = max(1, len(payloads) // (jobs * 4))
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(worker, payloads, chunksize=chunk))


# --------------------------------------------------------------------------
# Protocol 1 & 2: salient / minor pixel removal (APD)
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ApdCurve:
    """Average probability drop of the originally predicted class.

    `values[i]` is the mean over the dataset of
    softmax_after(k) - softmax_before(k) at `ratios[i]`; 0 pixels
    removed is the identity, so a ratio of 0 scores exactly 0.
    """

    method: str
    mode: str
    ratios: tuple
    values: tuple
    samples: int


def _apd_one_image(args):
    model, item, methods, ratios, order, fill, seed = args
    trace = md.forward(model, item.image)
    logits = md.logits(trace)
    k = _top1(logits)
    p_before = md.softmax(logits).data[k]
    pair = None
    deltas = []
    corr = None
    for method in methods:
        bundle, pair = _method_bundle(model, trace, k, method, seed, pair)
        row = []
        for r in ratios:
            if r == 0.0:
                row.append(0.0)
                continue
            picked = sal.rank_pixels(bundle, order, r)
            modified = remove_pixels(item.image, picked, fill)
            after = md.softmax(md.logits(md.forward(model, modified))).data[k]
            row.append(after - p_before)
        deltas.append(row)
    if pair is not None:
        pos = sal.assemble_pane(pair, "pos")
        neg = sal.assemble_pane(pair, "neg")
        corr = _pearson(list(pos.map.data), list(neg.map.data))
    return deltas, corr


def apd_curve(cfg: EvalConfig, mode: str) -> dict:
    """Run salient (descending value) or minor (ascending |value|) removal.

    Returns {method: ApdCurve}.  The explained class is each image's
    original top-1 prediction.  Also records, observationally, the mean
    Pearson correlation between the positive and negative maps whenever
    an excitation pair was computed (`apd_curve.last_pos_neg_pearson`).
    """
    if mode not in (SALIENT, MINOR):
        raise ValueError(f"mode must be {SALIENT!r} or {MINOR!r}")
    order = sal.DESC_VALUE if mode == SALIENT else sal.ASC_ABS
    model, items = _load_inputs(cfg)
    return apd_curve_on(model, items, cfg, mode=mode, order=order)


def apd_curve_on(model, items, cfg: EvalConfig, mode: str, order=None) -> dict:
    """apd_curve on pre-loaded inputs (used by tests and the CLI)."""
    if order is None:
        order = sal.DESC_VALUE if mode == SALIENT else sal.ASC_ABS
    payloads = [
        (model, item, cfg.methods, cfg.ratios, order, cfg.fill, _image_seed(cfg.seed, i))
        for i, item in enumerate(items)
    ]
    results = _map_images(_apd_one_image, payloads, cfg.jobs)
    n = len(items)
    curves = {}
    for mi, method in enumerate(cfg.methods):
        values = tuple(
            sum(res[0][mi][ri] for res in results) / n for ri in range(len(cfg.ratios))
        )
        curves[method] = ApdCurve(method, mode, tuple(cfg.ratios), values, n)
    corrs = [res[1] for res in results if res[1] is not None]
    apd_curve.last_pos_neg_pearson = (sum(corrs) / len(corrs)) if corrs else None
    return curves


apd_curve.last_pos_neg_pearson = None


# --------------------------------------------------------------------------
# Protocol 3: logit-delta tables
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LogitDeltaTable:
    """Logit change of the predicted class after a one-step subtraction.

    Pixels inside the chosen evidence region have 1.0 subtracted from
    every channel (clamped at 0) on the 0-255 scale.  `sum_deltas[i]`
    accumulates logit_after - logit_before over the dataset;
    `direction_fractions[i]` is the share of images whose delta moved
    in the expected direction (decrease for the positive region,
    increase for the negative region).
    """

    method: str
    variant: str
    ratios: tuple
    sum_deltas: tuple
    direction_fractions: tuple
    samples: int


def _subtract_one(image: Tensor, positions) -> Tensor:
    c, h, w = image.shape
    data = list(image.data)
    plane = h * w
    for row, col in positions:
        if not (0 <= row < h and 0 <= col < w):
            raise ValueError(f"pixel ({row}, {col}) outside {h}x{w} image")
        base = row * w + col
        for cc in range(c):
            idx = cc * plane + base
            v = data[idx] - 1.0
            data[idx] = v if v > 0.0 else 0.0
    return Tensor(image.shape, data, F64)


def _logit_one_image(args):
    model, item, method, ratios, order, seed = args
    trace = md.forward(model, item.image)
    logits = md.logits(trace)
    k = _top1(logits)
    before = logits.data[k]
    bundle, _ = _method_bundle(model, trace, k, method, seed, None)
    out = []
    for r in ratios:
        if r == 0.0:
            out.append(0.0)
            continue
        picked = sal.rank_pixels(bundle, order, r)
        modified = _subtract_one(item.image, picked)
        after = md.logits(md.forward(model, modified)).data[k]
        out.append(after - before)
    return out


def logit_delta(cfg: EvalConfig, variant: str, method: str = sal.PANE_SUM) -> LogitDeltaTable:
    """One-intensity-step subtraction inside the pos/neg evidence region."""
    model, items = _load_inputs(cfg)
    return logit_delta_on(model, items, cfg, variant, method)


def logit_delta_on(model, items, cfg: EvalConfig, variant: str, method: str = sal.PANE_SUM) -> LogitDeltaTable:
    if variant not in (POS_REGION, NEG_REGION):
        raise ValueError(f"variant must be {POS_REGION!r} or {NEG_REGION!r}")
    if cfg.scale != PIXEL_MAX:
        raise ValueError(
            f"the one-step subtraction protocol is defined on the 0-{int(PIXEL_MAX)} "
            f"scale; config says {cfg.scale}"
        )
    order = sal.DESC_SIGNED if variant == POS_REGION else sal.ASC_SIGNED
    payloads = [
        (model, item, method, cfg.ratios, order, _image_seed(cfg.seed, i))
        for i, item in enumerate(items)
    ]
    results = _map_images(_logit_one_image, payloads, cfg.jobs)
    n = len(items)
    sums = []
    fractions = []
    for ri, r in enumerate(cfg.ratios):
        deltas = [res[ri] for res in results]
        sums.append(sum(deltas))
        if r == 0.0:
            fractions.append(0.0)
            continue
        if variant == POS_REGION:
            good = sum(1 for d in deltas if d < 0.0)
        else:
            good = sum(1 for d in deltas if d > 0.0)
        fractions.append(good / n)
    return LogitDeltaTable(method, variant, tuple(cfg.ratios), tuple(sums), tuple(fractions), n)


# --------------------------------------------------------------------------
# Protocol 4: I-FGSM attack guidance
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AttackResult:
    delta: Tensor
    success: bool


@dataclass(frozen=True)
class AttackTable:
    """Attack success when only the top-ranked region keeps its perturbation."""

    methods: tuple
    keep_ratios: tuple
    success_rates: dict = field(compare=False)  # (method, ratio) -> rate
    unrestricted_rate: float = 0.0
    samples: int = 0


def ifgsm(model, image: Tensor, class_index: int, linf: float, step: float, iters: int) -> AttackResult:
    """Iterative sign-gradient ascent on the cross-entropy of `class_index`.

    Each iteration moves every pixel by +-step along the loss gradient
    sign, then clips to the L-infinity ball of radius `linf` around the
    original image and to the valid 0-255 range.  Returns the final
    perturbation and whether the top-1 prediction changed.
    """
    if linf < 0.0 or step < 0.0 or iters < 0:
        raise ValueError("linf, step, and iters must be non-negative")
    if not (0 <= class_index < model.class_count):
        raise ValueError(f"class index {class_index} out of range")
    x0 = image.astype(F64)
    adv = list(x0.data)
    k = class_index
    for _ in range(iters):
        trace = md.forward(model, Tensor(x0.shape, adv, F64))
        probs = md.softmax(md.logits(trace))
        seed = list(probs.data)
        seed[k] -= 1.0  # gradient of cross-entropy at the logits
        g = gd.backward_from_seed(model, trace, Tensor((model.class_count,), seed, F64))
        for i, gv in enumerate(g.data):
            v = adv[i]
            if gv > 0.0:
                v += step
            elif gv < 0.0:
                v -= step
            lo = x0.data[i] - linf
            hi = x0.data[i] + linf
            if v < lo:
                v = lo
            elif v > hi:
                v = hi
            if v < 0.0:
                v = 0.0
            elif v > PIXEL_MAX:
                v = PIXEL_MAX
            adv[i] = v
    final = Tensor(x0.shape, adv, F64)
    delta = Tensor(x0.shape, [a - b for a, b in zip(adv, x0.data)], F64)
    success = _top1(md.logits(md.forward(model, final))) != k
    return AttackResult(delta, success)


def _mask_delta(delta: Tensor, positions) -> Tensor:
    """Keep the perturbation only at the given (row, col) pixels."""
    c, h, w = delta.shape
    keep = set()
    plane = h * w
    for row, col in positions:
        keep.add(row * w + col)
    data = [0.0] * delta.size
    for cc in range(c):
        off = cc * plane
        for base in keep:
            data[off + base] = delta.data[off + base]
    return Tensor(delta.shape, data, F64)


def _attack_one_image(args):
    model, item, methods, keep_ratios, linf, step, iters, seed = args
    trace = md.forward(model, item.image)
    k = _top1(md.logits(trace))
    attack = ifgsm(model, item.image, k, linf, step, iters)
    pair = None
    rates = {}
    for method in methods:
        bundle, pair = _method_bundle(model, trace, k, method, seed, pair)
        for r in keep_ratios:
            picked = sal.rank_pixels(bundle, sal.DESC_VALUE, r)
            masked = _mask_delta(attack.delta, picked)
            adv = Tensor(
                item.image.shape,
                [a + b for a, b in zip(item.image.astype(F64).data, masked.data)],
                F64,
            )
            hit = _top1(md.logits(md.forward(model, adv))) != k
            rates[(method, r)] = 1 if hit else 0
    return rates, 1 if attack.success else 0


def guided_attack_eval(
    cfg: EvalConfig,
    keep_ratios,
    linf: float = ATTACK_LINF,
    step: float = ATTACK_STEP,
    iters: int = ATTACK_ITERS,
) -> AttackTable:
    """Gate I-FGSM perturbations by each method's top-ranked region.

    A keep ratio of 1.0 retains the whole perturbation, so its success
    rate reproduces the unrestricted attack exactly.
    """
    model, items = _load_inputs(cfg)
    return guided_attack_eval_on(model, items, cfg, keep_ratios, linf, step, iters)


def guided_attack_eval_on(
    model,
    items,
    cfg: EvalConfig,
    keep_ratios,
    linf: float = ATTACK_LINF,
    step: float = ATTACK_STEP,
    iters: int = ATTACK_ITERS,
) -> AttackTable:
    keep_ratios = tuple(keep_ratios)
    if not keep_ratios:
        raise ValueError("at least one keep ratio is required")
    for r in keep_ratios:
        if not (0.0 < r <= 1.0):
            raise ValueError(f"keep ratio {r} outside (0, 1]")
    payloads = [
        (model, item, cfg.methods, keep_ratios, linf, step, iters, _image_seed(cfg.seed, i))
        for i, item in enumerate(items)
    ]
    results = _map_images(_attack_one_image, payloads, cfg.jobs)
    n = len(items)
    rates = {}
    for method in cfg.methods:
        for r in keep_ratios:
            rates[(method, r)] = sum(res[0][(method, r)] for res in results) / n
    unrestricted = sum(res[1] for res in results) / n
    return AttackTable(tuple(cfg.methods), keep_ratios, rates, unrestricted, n)


# --------------------------------------------------------------------------
# Emission: CSV rows + JSON summaries (byte-deterministic)
# --------------------------------------------------------------------------


def _fmt(v: float) -> str:
    return repr(float(v))


def apd_csv(curves: dict) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["method", "ratio", "apd", "samples"])
    for method in sorted(curves):
        c = curves[method]
        for r, v in zip(c.ratios, c.values):
            w.writerow([method, _fmt(r), _fmt(v), c.samples])
    return out.getvalue()


def logit_csv(table: LogitDeltaTable) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["method", "variant", "ratio", "sum_logit_delta", "expected_direction_fraction", "samples"])
    for r, s, f in zip(table.ratios, table.sum_deltas, table.direction_fractions):
        w.writerow([table.method, table.variant, _fmt(r), _fmt(s), _fmt(f), table.samples])
    return out.getvalue()


def attack_csv(table: AttackTable) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["method", "keep_ratio", "success_rate", "samples"])
    for method in table.methods:
        for r in table.keep_ratios:
            w.writerow([method, _fmt(r), _fmt(table.success_rates[(method, r)]), table.samples])
    w.writerow(["unrestricted", _fmt(1.0), _fmt(table.unrestricted_rate), table.samples])
    return out.getvalue()


def summary_json(kind: str, cfg: EvalConfig, payload: dict) -> str:
    doc = {
        "kind": kind,
        "config": {
            "dataset": cfg.dataset,
            "model": cfg.model,
            "methods": list(cfg.methods),
            "ratios": list(cfg.ratios),
            "fill": cfg.fill,
            "scale": cfg.scale,
            "seed": cfg.seed,
        },
    }
    doc.update(payload)
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def curves_payload(curves: dict) -> dict:
    body = {
        m: {"ratios": list(c.ratios), "apd": list(c.values), "samples": c.samples}
        for m, c in curves.items()
    }
    payload = {"curves": body}
    corr = apd_curve.last_pos_neg_pearson
    if corr is not None:
        payload["pos_neg_pearson_mean"] = corr
    return payload


def logit_payload(table: LogitDeltaTable) -> dict:
    return {
        "method": table.method,
        "variant": table.variant,
        "ratios": list(table.ratios),
        "sum_logit_delta": list(table.sum_deltas),
        "expected_direction_fraction": list(table.direction_fractions),
        "samples": table.samples,
    }


def attack_payload(table: AttackTable) -> dict:
    return {
        "methods": list(table.methods),
        "keep_ratios": list(table.keep_ratios),
        "success_rates": {
            f"{m}@{_fmt(r)}": table.success_rates[(m, r)]
            for m in table.methods
            for r in table.keep_ratios
        },
        "unrestricted_rate": table.unrestricted_rate,
        "samples": table.samples,
    }
