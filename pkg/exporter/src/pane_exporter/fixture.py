"""Train and emit the desk-scale fixture bundle.

The bundle stands in for full-scale victim networks: a six-layer
CNN (normalize, conv, relu, maxpool, flatten, linear) trained on a
synthetic two-class image set — solid patches versus striped patches —
to at least 95% train accuracy.  Output directory layout:

    fixture.panew     converted weights
    manifest.json     layer map, normalization, probe logits
    labels.csv        filename,label for the 100-image eval set
    images/*.ppm      eval images (binary P6, values 8-247)

Everything is a pure function of the seed: images, initialization, and
batching all draw from seeded generators, so the same seed reproduces
the bundle byte for byte.
"""

from __future__ import annotations

import math
import os
import random

import torch
from torch import nn

from pane.imageio import write_image
from pane.tensor import F64, Tensor

from .convert import Normalize, export_weights

HEIGHT = WIDTH = 32
CHANNELS = 3
PIXEL_LO, PIXEL_HI = 8.0, 247.0  # keep away from the 0/255 rails


def _render_image(rng: random.Random, label: int) -> list:
    """One [C,H,W] flat list of u8-valued floats.

    Both classes paint a soft-edged patch at a random position on a
    noisy gradient background; class 0 fills the patch solid, class 1
    carves it into stripe bands.  Confining the evidence to the patch
    keeps the background genuinely uninformative, which the removal
    protocols need: low-ranked pixels must come out without moving the
    logits, while the top-ranked few carry real weight.
    """
    base = [rng.uniform(70.0, 190.0) for _ in range(CHANNELS)]
    gx = rng.uniform(-0.9, 0.9)
    gy = rng.uniform(-0.9, 0.9)
    noise = rng.uniform(4.0, 14.0)
    mix = [rng.uniform(0.35, 1.0) for _ in range(CHANNELS)]
    sign = rng.choice([-1.0, 1.0])
    mag = rng.uniform(60.0, 110.0)
    cx = rng.uniform(10.0, 22.0)
    cy = rng.uniform(10.0, 22.0)
    radius = rng.uniform(5.0, 9.0)
    if label == 1:
        ux, uy = rng.choice([(1.0, 0.0), (0.0, 1.0), (0.7071, 0.7071), (0.7071, -0.7071)])
        period = rng.uniform(4.0, 7.0)
        phase0 = rng.uniform(0.0, 1.0)
    plane = HEIGHT * WIDTH
    data = [0.0] * (CHANNELS * plane)
    for y in range(HEIGHT):
        for x in range(WIDTH):
            dist = math.hypot(x - cx, y - cy)
            coverage = min(1.0, max(0.0, radius - dist + 0.5))
            if label == 1 and coverage > 0.0:
                phase = (x * ux + y * uy) / period + phase0
                if (phase - math.floor(phase)) >= 0.5:
                    coverage = 0.0
            bump = sign * mag * coverage
            grad = gx * (x - WIDTH / 2) + gy * (y - HEIGHT / 2)
            idx = y * WIDTH + x
            for c in range(CHANNELS):
                v = base[c] + grad + rng.uniform(-noise, noise) + bump * mix[c]
                v = float(round(v))
                if v < PIXEL_LO:
                    v = PIXEL_LO
                elif v > PIXEL_HI:
                    v = PIXEL_HI
                data[c * plane + idx] = v
    return data


def _make_split(rng: random.Random, count: int) -> tuple[list, list]:
    labels = [i % 2 for i in range(count)]
    rng.shuffle(labels)
    return [_render_image(rng, lab) for lab in labels], labels


def _channel_stats(images: list) -> tuple[list, list]:
    plane = HEIGHT * WIDTH
    mean = [0.0] * CHANNELS
    var = [0.0] * CHANNELS
    n = len(images) * plane
    for img in images:
        for c in range(CHANNELS):
            mean[c] += sum(img[c * plane : (c + 1) * plane])
    mean = [m / n for m in mean]
    for img in images:
        for c in range(CHANNELS):
            var[c] += sum((v - mean[c]) ** 2 for v in img[c * plane : (c + 1) * plane])
    std = [max(math.sqrt(v / n), 1e-6) for v in var]
    return mean, std


def build_net(mean, std, seed: int) -> nn.Sequential:
    torch.manual_seed(seed)
    return nn.Sequential(
        Normalize(mean, std),
        nn.Conv2d(CHANNELS, 8, 3, padding=1),
        nn.ReLU(),
        nn.MaxPool2d(2, 2),
        nn.Flatten(),
        nn.Linear(8 * (HEIGHT // 2) * (WIDTH // 2), 2),
    )


def train_fixture(
    seed: int = 0,
    out_dir: str = "fixtures",
    train_count: int = 400,
    eval_count: int = 100,
    max_epochs: int = 40,
    accuracy_floor: float = 0.95,
    dropout_p: float = 0.02,
) -> dict:
    """Train the fixture net and write the full bundle under out_dir."""
    torch.set_num_threads(1)
    data_rng = random.Random(seed)
    train_images, train_labels = _make_split(data_rng, train_count)
    eval_rng = random.Random(seed + 1000)
    eval_images, eval_labels = _make_split(eval_rng, eval_count)
    mean, std = _channel_stats(train_images)

    xs = torch.tensor(train_images, dtype=torch.float32).reshape(
        train_count, CHANNELS, HEIGHT, WIDTH
    )
    ys = torch.tensor(train_labels, dtype=torch.int64)
    net = build_net(mean, std, seed)
    opt = torch.optim.Adam(net.parameters(), lr=3e-3)
    loss_fn = nn.CrossEntropyLoss()
    batch = 50
    order_rng = random.Random(seed + 2000)
    accuracy = 0.0
    net.train()
    for _epoch in range(max_epochs):
        order = list(range(train_count))
        order_rng.shuffle(order)
        for start in range(0, train_count, batch):
            idx = torch.tensor(order[start : start + batch], dtype=torch.int64)
            xb = xs[idx]
            if dropout_p > 0.0:
                # Pixel-dropout augmentation: zero whole pixels (all
                # channels) at random so the net tolerates sparse
                # blacked-out regions the way the removal protocols
                # produce them.
                keep = (torch.rand(xb.shape[0], 1, HEIGHT, WIDTH) > dropout_p).to(xb.dtype)
                xb = xb * keep
            opt.zero_grad()
            loss = loss_fn(net(xb), ys[idx])
            loss.backward()
            opt.step()
        net.eval()
        with torch.no_grad():
            accuracy = float((net(xs).argmax(dim=1) == ys).float().mean())
        net.train()
        if accuracy >= 0.99 and _epoch >= 2:
            break
    if accuracy < accuracy_floor:
        raise RuntimeError(
            f"train accuracy {accuracy:.3f} below the {accuracy_floor:.2f} floor "
            f"after {max_epochs} epochs; try a different seed"
        )
    net.eval()

    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    names = []
    lines = ["filename,label"]
    for i, (img, lab) in enumerate(zip(eval_images, eval_labels)):
        name = f"images/img_{i:03d}.ppm"
        write_image(Tensor((CHANNELS, HEIGHT, WIDTH), img, F64), os.path.join(out_dir, name))
        names.append(name)
        lines.append(f"{name},{lab}")
    with open(os.path.join(out_dir, "labels.csv"), "w") as fh:
        fh.write("\n".join(lines) + "\n")

    probe_tensors = [
        Tensor((CHANNELS, HEIGHT, WIDTH), eval_images[i], F64) for i in range(10)
    ]
    manifest = export_weights(
        net,
        (CHANNELS, HEIGHT, WIDTH),
        os.path.join(out_dir, "fixture.panew"),
        manifest_path=os.path.join(out_dir, "manifest.json"),
        name="fixture",
        probe_tensors=probe_tensors,
        probe_meta={"kind": "images", "names": names[:10]},
        extra={
            "seed": seed,
            "train_accuracy": accuracy,
            "train_images": train_count,
            "eval_images": eval_count,
            "normalization": {"mean": mean, "std": std},
            "classes": {"0": "solid", "1": "striped"},
        },
    )
    return {
        "out_dir": out_dir,
        "accuracy": accuracy,
        "manifest": manifest,
        "weight_path": os.path.join(out_dir, "fixture.panew"),
    }
