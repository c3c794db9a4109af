"""Loss terms for point-supervised segmentation, with analytic gradients.

Every term returns its scalar value together with the exact gradient with
respect to the prediction probabilities, so the whole objective can be pulled
back through :func:`pointseg.grids.softmax_backward` into logits. The terms:

* partial cross-entropy over the handful of annotated pixels;
* the piecewise-constant (Mumford-Shah style) data term, with the full
  quotient-rule chain through each class's soft intensity mean;
* anisotropic total variation of the probability maps;
* a contrastive term over per-class variance maps, pulling same-class maps
  from different images together and pushing different-class maps apart,
  with temperature-scaled cosine similarities.

Integrals over the pixel domain are discretized as plain sums, unnormalized
by pixel count, so loss weights are calibrated to a fixed resolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidConfigError, InvalidInputError
from .grids import Image, LogitField, SoftPrediction, softmax, softmax_backward

LOG_CLAMP = 1e-12    # floor inside log() of the cross-entropy
MEAN_DENOM_EPS = 1e-8   # guards vanishing class mass in the soft means
COSINE_EPS = 1e-12   # guards zero vectors in cosine similarity
TV_SMOOTH_EPS = 1e-12   # |x| ~ x / sqrt(x^2 + eps) in the TV gradient

MODES = ("pce", "pce+ms", "pce+cv")


@dataclass(frozen=True)
class PointAnnotation:
    """Sparse point labels: at most one (row, col) pixel per class."""

    points: tuple  # of (row, col, class_id)
    num_classes: int

    def __post_init__(self):
        pts = tuple((int(r), int(c), int(k)) for r, c, k in self.points)
        seen_classes = set()
        seen_pixels = set()
        for r, c, k in pts:
            if not 0 <= k < self.num_classes:
                raise InvalidInputError(f"annotated class {k} outside [0, {self.num_classes})")
            if k in seen_classes:
                raise InvalidInputError(f"class {k} annotated more than once")
            if (r, c) in seen_pixels:
                raise InvalidInputError(f"pixel ({r}, {c}) annotated more than once")
            seen_classes.add(k)
            seen_pixels.add((r, c))
        object.__setattr__(self, "points", pts)

    @property
    def classes(self) -> tuple:
        """Sorted ids of the classes this annotation covers."""
        return tuple(sorted(k for _, _, k in self.points))


@dataclass(frozen=True)
class ClassMeans:
    """Soft intensity centroid of each class's predicted region."""

    means: np.ndarray  # (K,)


@dataclass(frozen=True)
class VarianceMap:
    """Per-pixel squared deviation from a class mean, weighted by the prediction."""

    class_id: int
    values: np.ndarray  # (H, W), nonnegative


@dataclass(frozen=True)
class PairingPlan:
    """Positive-partner assignment for contrastive anchors.

    Maps (batch index, class id) to the batch index of another image whose
    annotation contains the same class. Anchors without an entry are skipped.
    """

    partners: dict = field(default_factory=dict)

    def partner(self, n: int, k: int):
        return self.partners.get((n, k))

    def items(self):
        return sorted(self.partners.items())


@dataclass(frozen=True)
class LossBreakdown:
    """Mode-selected objective with its components and per-image logit gradients."""

    mode: str
    pce: float
    ms_data: float
    cv_contrastive: float
    tv: float
    total: float
    grad_wrt_logits: list  # one (K, H, W) array per batch image


def partial_cross_entropy(pred: SoftPrediction, ann: PointAnnotation):
    """Cross-entropy restricted to the annotated pixels.

    Returns (value, gradient w.r.t. probabilities). Probabilities are clamped
    at 1e-12 inside the log, so a confidently wrong prediction yields a large
    but finite penalty. An empty annotation contributes 0 with a zero
    gradient: no supervision, not an error.
    """
    probs = pred.probabilities
    K, H, W = probs.shape
    if ann.num_classes != K:
        raise InvalidInputError(f"annotation has {ann.num_classes} classes, prediction has {K}")
    grad = np.zeros_like(probs)
    value = 0.0
    for r, c, k in ann.points:
        if not (0 <= r < H and 0 <= c < W):
            raise InvalidInputError(f"annotated pixel ({r}, {c}) outside {H}x{W} image")
        p = probs[k, r, c]
        value -= math.log(max(p, LOG_CLAMP))
        if p > LOG_CLAMP:
            grad[k, r, c] = -1.0 / p
    return value, grad


def _mean_stats(image: Image, pred: SoftPrediction):
    """Per-class weighted sums behind the soft means: intensity mass, total mass, mean."""
    I = image.intensities
    P = pred.probabilities
    if I.shape != P.shape[1:]:
        raise InvalidInputError(f"image shape {I.shape} != prediction shape {P.shape[1:]}")
    intensity_mass = (P * I[None, :, :]).sum(axis=(1, 2))
    mass = P.sum(axis=(1, 2))
    means = intensity_mass / (mass + MEAN_DENOM_EPS)
    return intensity_mass, mass, means


def class_means(image: Image, pred: SoftPrediction) -> ClassMeans:
    """Prediction-weighted mean intensity of each class region.

    A class with vanishing predicted mass gets mean 0 through the epsilon
    in the denominator.
    """
    _, _, means = _mean_stats(image, pred)
    return ClassMeans(means)


def variance_map(image: Image, pred: SoftPrediction, means: ClassMeans, k: int) -> VarianceMap:
    """Elementwise (I - c_k)^2 * P_k: the appearance representation contrasted across images."""
    if not 0 <= k < pred.num_classes:
        raise InvalidInputError(f"class {k} outside [0, {pred.num_classes})")
    I = image.intensities
    values = (I - means.means[k]) ** 2 * pred.probabilities[k]
    return VarianceMap(k, values)


def _variance_map_backward(image, probs_k, mass_k, mean_k, grad_wrt_map, freeze_means):
    """Gradient of sum(g * z_k) w.r.t. P_k, where z_k = (I - c_k)^2 P_k.

    Includes the quotient-rule chain through c_k unless freeze_means is on.
    """
    I = image.intensities
    dev = I - mean_k
    grad = grad_wrt_map * dev**2
    if not freeze_means:
        # dL/dc_k collects -2 (I - c_k) P_k g over pixels; c_k = A/(B + eps)
        # so dc_k/dP_k(r) = (I(r) - c_k) / (B + eps).
        grad_mean = -2.0 * (grad_wrt_map * probs_k * dev).sum()
        grad += grad_mean * dev / (mass_k + MEAN_DENOM_EPS)
    return grad


def ms_data_term(image: Image, pred: SoftPrediction, freeze_means: bool = False):
    """Piecewise-constant data term: sum over classes and pixels of (I - c_k)^2 P_k.

    Returns (value, gradient w.r.t. probabilities). The gradient carries the
    full dependence of each c_k on the prediction.
    """
    _, mass, means = _mean_stats(image, pred)
    I = image.intensities
    P = pred.probabilities
    K = P.shape[0]
    grad = np.empty_like(P)
    value = 0.0
    ones = np.ones_like(I)
    for k in range(K):
        dev = I - means[k]
        value += float((dev**2 * P[k]).sum())
        grad[k] = _variance_map_backward(image, P[k], mass[k], means[k], ones, freeze_means)
    return value, grad


def tv_term(pred: SoftPrediction, smooth_value: bool = False):
    """Anisotropic total variation of the probability maps.

    Sums |forward horizontal difference| + |forward vertical difference| over
    all classes; differences reaching outside the grid contribute nothing.
    The reported value uses the exact absolute differences; the gradient is
    that of the smoothed surrogate sqrt(x^2 + 1e-12), which is 0 at kinks.
    With smooth_value the surrogate is also used for the value, so gradient
    checks can differentiate the very function the gradient belongs to.
    """
    P = pred.probabilities
    dh = P[:, :, 1:] - P[:, :, :-1]
    dv = P[:, 1:, :] - P[:, :-1, :]
    if smooth_value:
        value = float(np.sqrt(dh**2 + TV_SMOOTH_EPS).sum() + np.sqrt(dv**2 + TV_SMOOTH_EPS).sum())
    else:
        value = float(np.abs(dh).sum() + np.abs(dv).sum())
    grad = np.zeros_like(P)
    uh = dh / np.sqrt(dh**2 + TV_SMOOTH_EPS)
    uv = dv / np.sqrt(dv**2 + TV_SMOOTH_EPS)
    grad[:, :, 1:] += uh
    grad[:, :, :-1] -= uh
    grad[:, 1:, :] += uv
    grad[:, :-1, :] -= uv
    return value, grad


def cosine_similarity(a, b) -> float:
    """Cosine similarity of two maps flattened to vectors, zero-vector safe."""
    av = np.asarray(getattr(a, "values", a), dtype=np.float64).reshape(-1)
    bv = np.asarray(getattr(b, "values", b), dtype=np.float64).reshape(-1)
    if av.shape != bv.shape:
        raise InvalidInputError(f"cosine inputs disagree in size: {av.shape} vs {bv.shape}")
    denom = np.linalg.norm(av) * np.linalg.norm(bv) + COSINE_EPS
    return float(av @ bv / denom)


def _cosine_with_backward(a: np.ndarray, b: np.ndarray):
    """Cosine similarity of flat vectors plus its gradients w.r.t. both sides."""
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    dot = float(a @ b)
    denom = na * nb + COSINE_EPS
    sim = dot / denom
    # d sim / da = b/denom - (dot * nb / na) * a / denom^2; the guard keeps the
    # coefficient finite when a == 0 (dot is 0 there, so the term vanishes).
    na_safe = na if na > 0.0 else 1.0
    nb_safe = nb if nb > 0.0 else 1.0
    da = b / denom - (dot * nb / na_safe) * a / denom**2
    db = a / denom - (dot * na / nb_safe) * b / denom**2
    return sim, da, db


def contrastive_anchor_term(pos_sim: float, neg_sims, tau: float):
    """One anchor's -log(pos / (pos + neg)) with pos/neg = exp(similarity / tau).

    Returns (term, d_term/d_pos_sim, d_term/d_neg_sims). Exponentials are
    computed relative to the max similarity, so small temperatures stay finite.
    """
    if tau <= 0:
        raise InvalidConfigError(f"temperature must be positive, got {tau}")
    neg_sims = np.asarray(neg_sims, dtype=np.float64)
    m = max(pos_sim, neg_sims.max()) if neg_sims.size else pos_sim
    e_pos = math.exp((pos_sim - m) / tau)
    e_neg = np.exp((neg_sims - m) / tau)
    total = e_pos + e_neg.sum()
    term = m / tau + math.log(total) - pos_sim / tau
    d_pos = (e_pos / total - 1.0) / tau
    d_negs = e_neg / total / tau
    return term, d_pos, d_negs


@dataclass(frozen=True)
class ContrastiveVarianceResult:
    """Value and gradients of the contrastive-variance objective over a batch."""

    contrastive: float   # sum of anchor terms, unweighted
    tv: float            # sum of per-image TV values, unweighted
    total: float         # lambda_cv * contrastive + mu * tv
    grad_wrt_probs: list  # one (K, H, W) array per image, gradient of `total`
    num_anchors: int


def cv_loss(images, preds, present, plan: PairingPlan, tau: float,
            lambda_cv: float, mu: float, freeze_means: bool = False,
            smooth_tv_value: bool = False) -> ContrastiveVarianceResult:
    """Contrastive variance loss over a batch, with full gradients.

    For each anchor (image n, class k) that has a positive partner in `plan`,
    adds -log(pos / (pos + neg)), where pos compares the anchor's variance map
    with the partner's same-class map and neg compares it against every other
    image's maps of other classes (restricted to classes present there). The
    total adds mu times the TV of every image's prediction. Gradients flow
    through the variance maps, the class means, and the predictions.
    """
    if tau <= 0:
        raise InvalidConfigError(f"temperature must be positive, got {tau}")
    n_images = len(images)
    if n_images < 1 or len(preds) != n_images or len(present) != n_images:
        raise InvalidInputError("images, preds and present-class sets must align")
    shape = preds[0].spatial_shape
    present = [tuple(sorted(set(int(k) for k in s))) for s in present]
    for n in range(n_images):
        if preds[n].spatial_shape != shape:
            raise InvalidInputError("all predictions in a batch must share one H x W")
        for k in present[n]:
            if not 0 <= k < preds[n].num_classes:
                raise InvalidInputError(f"present class {k} outside range for image {n}")
    for (n, k), m in plan.items():
        if not (0 <= n < n_images and 0 <= m < n_images) or m == n:
            raise InvalidInputError(f"pairing ({n}, {k}) -> {m} is out of range or self-paired")
        if k not in present[n] or k not in present[m]:
            raise InvalidInputError(f"pairing ({n}, {k}) -> {m} names a class not present")

    # Variance maps (flattened) for every (image, present class).
    stats = [_mean_stats(images[n], preds[n]) for n in range(n_images)]
    zmaps, norms = {}, {}
    for n in range(n_images):
        _, mass, means = stats[n]
        I = images[n].intensities
        for k in present[n]:
            z = ((I - means[k]) ** 2 * preds[n].probabilities[k]).reshape(-1)
            zmaps[(n, k)] = z
            norms[(n, k)] = float(np.linalg.norm(z))

    grad_z = {key: np.zeros_like(z) for key, z in zmaps.items()}
    contrastive = 0.0
    num_anchors = 0
    for (n, k), m in plan.items():
        neg_keys = [
            (i, j)
            for i in range(n_images)
            if i != n
            for j in present[i]
            if j != k
        ]
        pairs = [((n, k), (m, k))] + [((n, k), key) for key in neg_keys]
        sims, grads_a, grads_b = [], [], []
        for a_key, b_key in pairs:
            sim, da, db = _cosine_with_backward(zmaps[a_key], zmaps[b_key])
            sims.append(sim)
            grads_a.append(da)
            grads_b.append(db)
        term, d_pos, d_negs = contrastive_anchor_term(sims[0], sims[1:], tau)
        contrastive += term
        num_anchors += 1
        coeffs = [lambda_cv * d_pos] + [lambda_cv * d for d in d_negs]
        for (a_key, b_key), coeff, da, db in zip(pairs, coeffs, grads_a, grads_b):
            grad_z[a_key] += coeff * da
            grad_z[b_key] += coeff * db

    tv_sum = 0.0
    grads = []
    for n in range(n_images):
        tv_value, tv_grad = tv_term(preds[n], smooth_tv_value)
        tv_sum += tv_value
        grad = mu * tv_grad
        _, mass, means = stats[n]
        for k in present[n]:
            gz = grad_z[(n, k)].reshape(shape)
            if np.any(gz):
                grad[k] += _variance_map_backward(
                    images[n], preds[n].probabilities[k], mass[k], means[k], gz, freeze_means
                )
        grads.append(grad)

    total = lambda_cv * contrastive + mu * tv_sum
    return ContrastiveVarianceResult(contrastive, tv_sum, total, grads, num_anchors)


@dataclass(frozen=True)
class LossSettings:
    """Hyperparameters shared by the composite objective.

    smooth_tv_value swaps the reported TV value for its smoothed surrogate;
    derivative checks set it so the objective matches the gradient everywhere.
    """

    lambda_cv: float = 0.3
    lambda_ms: float = 0.3
    mu: float = 1e-5
    tau: float = 0.07
    freeze_means: bool = False
    smooth_tv_value: bool = False


def total_loss(mode: str, images, logit_fields, annotations, plan: PairingPlan,
               settings: LossSettings) -> LossBreakdown:
    """Mode-selected training objective over a batch, differentiated to logits.

    Modes: "pce" is the supervised term alone; "pce+ms" adds the weighted
    piecewise-constant data term and TV; "pce+cv" adds the weighted
    contrastive-variance term and TV. Components a mode does not use are
    reported as 0.
    """
    if mode not in MODES:
        raise InvalidConfigError(f"unknown loss mode {mode!r}; expected one of {MODES}")
    n_images = len(images)
    if len(logit_fields) != n_images or len(annotations) != n_images:
        raise InvalidInputError("images, logits and annotations must align")

    preds = [softmax(lf) for lf in logit_fields]
    pce_sum = 0.0
    grads_probs = []
    for pred, ann in zip(preds, annotations):
        value, grad = partial_cross_entropy(pred, ann)
        pce_sum += value
        grads_probs.append(grad)

    ms_sum = 0.0
    cv_sum = 0.0
    tv_sum = 0.0
    if mode == "pce+ms":
        for n in range(n_images):
            ms_value, ms_grad = ms_data_term(images[n], preds[n], settings.freeze_means)
            tv_value, tv_grad = tv_term(preds[n], settings.smooth_tv_value)
            ms_sum += ms_value
            tv_sum += tv_value
            grads_probs[n] += settings.lambda_ms * ms_grad + settings.mu * tv_grad
    elif mode == "pce+cv":
        present = [ann.classes for ann in annotations]
        cv = cv_loss(images, preds, present, plan, settings.tau,
                     settings.lambda_cv, settings.mu, settings.freeze_means,
                     settings.smooth_tv_value)
        cv_sum = cv.contrastive
        tv_sum = cv.tv
        for n in range(n_images):
            grads_probs[n] += cv.grad_wrt_probs[n]

    total = pce_sum
    if mode == "pce+ms":
        total = pce_sum + settings.lambda_ms * ms_sum + settings.mu * tv_sum
    elif mode == "pce+cv":
        total = pce_sum + settings.lambda_cv * cv_sum + settings.mu * tv_sum

    grad_logits = [
        softmax_backward(lf, g) for lf, g in zip(logit_fields, grads_probs)
    ]
    return LossBreakdown(mode, pce_sum, ms_sum, cv_sum, tv_sum, total, grad_logits)
