"""Evaluation metrics.

Pixel metrics (SSIM, PSNR, sharpness difference) operate on HWC float
arrays in [0, 255]; generated tensors are mapped there with
``to_metric_space`` (affine from [-1, 1], round-to-nearest).  Classifier
metrics (KL score, inception score, top-k accuracy) take any callable
mapping such an array to a probability vector.  Segmentation scores decode
palette-colored semantic maps to labels first.
"""

import dataclasses
import json
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .data import decode_to_labels, tensor_to_image

PSNR_CAP = 100.0  # reported when the error term is exactly zero


def to_metric_space(t: torch.Tensor) -> np.ndarray:
    """Network-space tensor (C, H, W) in [-1, 1] -> float64 HWC in [0, 255]."""
    return tensor_to_image(t).astype(np.float64)


def _check_pair(a, b, min_size=1):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[0], a.shape[1]) < min_size:
        raise ValueError(f"images of size {a.shape[:2]} are smaller than {min_size}")
    return a, b


def gaussian_window(size=11, sigma=1.5):
    half = (size - 1) / 2.0
    coords = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def ssim(a, b, window_size=11, sigma=1.5):
    """Single-scale structural similarity, channel-averaged.

    Gaussian-weighted local statistics over fully interior windows,
    C1=(0.01*255)^2, C2=(0.03*255)^2.
    """
    a, b = _check_pair(a, b, min_size=window_size)
    kernel = gaussian_window(window_size, sigma)
    c1 = (0.01 * 255.0) ** 2
    c2 = (0.03 * 255.0) ** 2

    channel_vals = []
    for c in range(a.shape[2]):
        x = a[:, :, c]
        y = b[:, :, c]
        wx = np.lib.stride_tricks.sliding_window_view(x, (window_size, window_size))
        wy = np.lib.stride_tricks.sliding_window_view(y, (window_size, window_size))
        mu_x = np.tensordot(wx, kernel, axes=([2, 3], [0, 1]))
        mu_y = np.tensordot(wy, kernel, axes=([2, 3], [0, 1]))
        exx = np.tensordot(wx * wx, kernel, axes=([2, 3], [0, 1]))
        eyy = np.tensordot(wy * wy, kernel, axes=([2, 3], [0, 1]))
        exy = np.tensordot(wx * wy, kernel, axes=([2, 3], [0, 1]))
        var_x = exx - mu_x * mu_x
        var_y = eyy - mu_y * mu_y
        cov = exy - mu_x * mu_y
        ssim_map = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / (
            (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
        )
        channel_vals.append(ssim_map.mean())
    return float(np.mean(channel_vals))


def psnr(a, b):
    """10*log10(255^2 / MSE); identical inputs report the 100.0 cap."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return float(10.0 * np.log10(255.0 ** 2 / mse))


def _gradient_magnitude(img):
    # |I(i,j) - I(i-1,j)| + |I(i,j) - I(i,j-1)| over the valid interior.
    return (np.abs(img[1:, 1:] - img[:-1, 1:]) + np.abs(img[1:, 1:] - img[1:, :-1]))


def sharpness_difference(a, b):
    """Gradient-space PSNR: 10*log10(255^2 / mean |grad(a) - grad(b)|)."""
    a, b = _check_pair(a, b, min_size=2)
    diff = float(np.mean(np.abs(_gradient_magnitude(a) - _gradient_magnitude(b))))
    if diff == 0.0:
        return PSNR_CAP
    return float(10.0 * np.log10(255.0 ** 2 / diff))


# ---------------------------------------------------------------------------
# Classifier-based metrics
# ---------------------------------------------------------------------------

_PROB_EPS = 1e-12


def _posterior(clf, img):
    p = np.asarray(clf(img), dtype=np.float64).ravel()
    if p.size == 0 or np.any(p < -1e-7) or abs(p.sum() - 1.0) > 1e-5:
        raise ValueError(f"classifier output is not a distribution: sum={p.sum()}")
    return p


def kl_score(real_imgs, fake_imgs, clf):
    """Per-pair KL(p(y|fake) || p(y|real)); returns (mean, std) across pairs."""
    if len(real_imgs) != len(fake_imgs):
        raise ValueError("real and fake sets must be paired")
    values = []
    for real, fake in zip(real_imgs, fake_imgs):
        p = np.clip(_posterior(clf, fake), _PROB_EPS, None)
        q = np.clip(_posterior(clf, real), _PROB_EPS, None)
        values.append(float(np.sum(p * np.log(p / q))))
    values = np.asarray(values)
    return float(values.mean()), float(values.std())


def inception_score(fake_imgs, clf, n_splits=1):
    """exp(mean KL(p(y|x) || split marginal)), averaged over equal splits."""
    if len(fake_imgs) < n_splits or n_splits < 1:
        raise ValueError(f"cannot split {len(fake_imgs)} images into {n_splits} parts")
    probs = np.stack([_posterior(clf, img) for img in fake_imgs])
    scores = []
    for chunk in np.array_split(probs, n_splits):
        if chunk.shape[0] == 0:
            raise ValueError("empty split")
        marginal = np.clip(chunk.mean(axis=0), _PROB_EPS, None)
        p = np.clip(chunk, _PROB_EPS, None)
        kl = np.sum(p * np.log(p / marginal[None, :]), axis=1)
        scores.append(np.exp(kl.mean()))
    return float(np.mean(scores))


def _topk_indices(p, k):
    # Stable sort so that ties resolve to the lowest class index.
    return np.argsort(-p, kind="stable")[:k]


def topk_accuracy(real_imgs, fake_imgs, clf, k):
    """Two counting variants: (argmax match, real argmax inside fake's top-k)."""
    if len(real_imgs) != len(fake_imgs):
        raise ValueError("real and fake sets must be paired")
    hits_a = hits_b = 0
    for real, fake in zip(real_imgs, fake_imgs):
        pr = _posterior(clf, real)
        pf = _posterior(clf, fake)
        if k > pr.size:
            raise ValueError(f"k={k} exceeds {pr.size} classes")
        if int(pf.argmax()) == int(pr.argmax()):
            hits_a += 1
        if int(pr.argmax()) in _topk_indices(pf, k):
            hits_b += 1
    n = max(1, len(real_imgs))
    return hits_a / n, hits_b / n


# ---------------------------------------------------------------------------
# Segmentation scores
# ---------------------------------------------------------------------------

def segmentation_scores_from_labels(pred, gt):
    """(per-class accuracy, mean IOU) over the classes present in gt."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError("label maps must share shape")
    classes = np.unique(gt)
    accs, ious = [], []
    for c in classes:
        gt_c = gt == c
        pred_c = pred == c
        accs.append((pred_c & gt_c).sum() / gt_c.sum())
        union = (pred_c | gt_c).sum()
        ious.append((pred_c & gt_c).sum() / union if union else 0.0)
    return float(np.mean(accs)), float(np.mean(ious))


def segmentation_scores(pred_rgb, gt_rgb, palette):
    pred = decode_to_labels(np.asarray(pred_rgb, dtype=np.float64), palette)
    gt = decode_to_labels(np.asarray(gt_rgb, dtype=np.float64), palette)
    return segmentation_scores_from_labels(pred, gt)


# ---------------------------------------------------------------------------
# Small trainable classifier for synthetic scenes
# ---------------------------------------------------------------------------

class SmallClassifier(nn.Module):
    """Tiny scene classifier so the classifier-based metrics run end-to-end
    without any external pretrained model."""

    def __init__(self, n_classes, in_channels=3):
        super().__init__()
        self.n_classes = n_classes
        self.features = nn.Sequential(
            nn.Conv2d(in_channels, 16, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(16, 32, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.AdaptiveAvgPool2d(1),
        )
        self.head = nn.Linear(32, n_classes)

    def forward(self, x):
        return self.head(self.features(x).flatten(1))


def train_classifier(images, labels, n_classes, epochs=30, lr=1e-2, seed=0):
    """Fit a SmallClassifier on network-space tensors (C, H, W) in [-1, 1]."""
    gen = torch.Generator().manual_seed(seed)
    model = SmallClassifier(n_classes)
    for p in model.parameters():
        with torch.no_grad():
            if p.dim() > 1:
                p.normal_(0.0, 0.1, generator=gen)
            else:
                p.zero_()
    x = torch.stack(list(images))
    y = torch.as_tensor(list(labels), dtype=torch.long)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    ce = nn.CrossEntropyLoss()
    for _ in range(epochs):
        opt.zero_grad()
        loss = ce(model(x), y)
        loss.backward()
        opt.step()
    model.eval()
    return model


def save_classifier(model: SmallClassifier, path):
    from . import checkpoint as ckpt
    ckpt.save_archive(path, ckpt.module_tensors("clf", model),
                      meta={"n_classes": model.n_classes})


def load_classifier(path):
    """Load a SmallClassifier checkpoint and return its metric-space callable."""
    from . import checkpoint as ckpt
    tensors, meta = ckpt.load_archive(path)
    model = SmallClassifier(int(meta["n_classes"]))
    ckpt.load_module("clf", model, tensors)
    model.eval()
    return as_probability_fn(model)


def as_probability_fn(model: SmallClassifier):
    """Adapt a SmallClassifier to the metric-space callable contract."""

    def fn(img_hwc_255):
        arr = np.asarray(img_hwc_255, dtype=np.float64)
        t = torch.from_numpy(arr / 127.5 - 1.0).float().permute(2, 0, 1).unsqueeze(0)
        with torch.no_grad():
            return torch.softmax(model(t), dim=1).squeeze(0).numpy().astype(np.float64)

    return fn


# ---------------------------------------------------------------------------
# Aggregate report
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    n_images: int
    ssim: float = None
    psnr: float = None
    sd: float = None
    kl_mean: float = None
    kl_std: float = None
    inception_score: float = None
    top1_acc: tuple = None
    top5_acc: tuple = None
    per_class_acc: float = None
    mean_iou: float = None

    def to_json(self, **dumps_kwargs):
        d = dataclasses.asdict(self)
        d = {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}
        return json.dumps(d, sort_keys=True, **dumps_kwargs)


ALL_METRICS = ("ssim", "psnr", "sd", "kl", "is", "topk", "miou")


def compute_report(real_imgs, fake_imgs, metrics=("ssim", "psnr", "sd"),
                   clf=None, palette=None, n_splits=1, sample_ids=None):
    """Evaluate the selected metrics over paired image sets.

    Returns (MetricsReport, per_image_rows).  Images are HWC arrays in
    [0, 255] and are consumed in the given (deterministic) order.
    """
    unknown = set(metrics) - set(ALL_METRICS)
    if unknown:
        raise ValueError(f"unknown metrics: {sorted(unknown)}")
    if len(real_imgs) != len(fake_imgs):
        raise ValueError("real and fake sets must be paired")
    n = len(real_imgs)
    ids = list(sample_ids) if sample_ids is not None else [str(i) for i in range(n)]
    rows = [{"sample_id": sid} for sid in ids]
    report = MetricsReport(n_images=n)

    per_image = {"ssim": ssim, "psnr": psnr, "sd": sharpness_difference}
    for name, fn in per_image.items():
        if name not in metrics:
            continue
        vals = [fn(r, f) for r, f in zip(real_imgs, fake_imgs)]
        for row, v in zip(rows, vals):
            row[name] = v
        setattr(report, name, float(np.mean(vals)) if vals else None)

    if "kl" in metrics and clf is not None:
        report.kl_mean, report.kl_std = kl_score(real_imgs, fake_imgs, clf)
        for row, (r, f) in zip(rows, zip(real_imgs, fake_imgs)):
            p = np.clip(_posterior(clf, f), _PROB_EPS, None)
            q = np.clip(_posterior(clf, r), _PROB_EPS, None)
            row["kl"] = float(np.sum(p * np.log(p / q)))
    if "is" in metrics and clf is not None and n:
        report.inception_score = inception_score(fake_imgs, clf, n_splits=n_splits)
    if "topk" in metrics and clf is not None and n:
        n_classes = _posterior(clf, real_imgs[0]).size
        report.top1_acc = topk_accuracy(real_imgs, fake_imgs, clf, 1)
        report.top5_acc = topk_accuracy(real_imgs, fake_imgs, clf, min(5, n_classes))
    if "miou" in metrics and palette is not None:
        accs, ious = [], []
        for row, (r, f) in zip(rows, zip(real_imgs, fake_imgs)):
            acc, iou = segmentation_scores(f, r, palette)
            row["per_class_acc"], row["mean_iou"] = acc, iou
            accs.append(acc)
            ious.append(iou)
        if accs:
            report.per_class_acc = float(np.mean(accs))
            report.mean_iou = float(np.mean(ious))
    return report, rows
