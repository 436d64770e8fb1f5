"""Explanations: relevance, attribution maps, cut-outs, display patches,
input gradients.

Attribution maps are the prototype's patch activation grid upscaled to
input resolution with align-corners-true bilinear interpolation: grid
corners map exactly onto image corners, so grid node (i, j) lives at pixel
position (i*(h-1)/(h'-1), j*(w-1)/(w'-1)). `bilinear_sample` evaluates that
continuous field anywhere; the raster is just its values at integer pixels.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .data import ImageExample
from .errors import ExplainError
from .metrics import activation_precision
from .model import PartProtoNet

__all__ = [
    "AttributionMap",
    "CutOut",
    "DisplayPatch",
    "relevance",
    "attribution",
    "bilinear_sample",
    "extract_cutout",
    "top_activated",
    "display_patches",
    "input_gradient",
    "image_activations",
    "prototype_activation_precision",
    "cutout_to_json",
    "cutout_from_json",
]

FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


@dataclass
class AttributionMap:
    values: np.ndarray  # (h, w) nonnegative
    prototype: int
    image_id: str
    grid: np.ndarray    # (h', w') the pre-upscale activation grid


@dataclass
class CutOut:
    image_id: str
    boxes: list[tuple[int, int, int, int]]  # (top, left, bottom, right), exclusive ends
    patches: np.ndarray                     # (m, d') latent cells under the boxes
    scope: int | str                        # class id or "ALL"


@dataclass
class DisplayPatch:
    image_id: str
    contours: list[list[tuple[int, int]]]  # one traced boundary per component
    area: int
    overlay: np.ndarray                    # (h, w, 3) uint8 blend of image and heat
    pixels: np.ndarray                     # (h, w) bool, the component itself


def relevance(model: PartProtoNet, x: ImageExample | np.ndarray, y: int) -> list[tuple[int, float]]:
    """Per-prototype contribution w_j^y * a_j(x) to the logit of class y,
    sorted descending (prototype id breaks ties)."""
    a, _, _ = model.forward(x)
    scores = model.aggregation.data[y] * a
    return sorted(((j, float(s)) for j, s in enumerate(scores)), key=lambda t: (-t[1], t[0]))


def bilinear_sample(grid: np.ndarray, rows, cols, out_h: int, out_w: int) -> np.ndarray:
    """Evaluate the align-corners bilinear field of `grid` at fractional
    PIXEL coordinates (rows, cols) of an out_h x out_w image."""
    gh, gw = grid.shape
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    gy = rows * ((gh - 1) / (out_h - 1)) if out_h > 1 else np.zeros_like(rows)
    gx = cols * ((gw - 1) / (out_w - 1)) if out_w > 1 else np.zeros_like(cols)
    y0 = np.clip(np.floor(gy).astype(int), 0, max(gh - 2, 0))
    x0 = np.clip(np.floor(gx).astype(int), 0, max(gw - 2, 0))
    y1 = np.minimum(y0 + 1, gh - 1)
    x1 = np.minimum(x0 + 1, gw - 1)
    wy = gy - y0
    wx = gx - x0
    return ((1 - wy) * (1 - wx) * grid[y0, x0] + (1 - wy) * wx * grid[y0, x1]
            + wy * (1 - wx) * grid[y1, x0] + wy * wx * grid[y1, x1])


def _upscale(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    rr, cc = np.meshgrid(np.arange(out_h), np.arange(out_w), indexing="ij")
    return bilinear_sample(grid, rr, cc, out_h, out_w)


def attribution(model: PartProtoNet, j: int, x: ImageExample | np.ndarray) -> AttributionMap:
    """Upscaled activation map of prototype j on image x."""
    if not 0 <= j < model.config.k:
        raise IndexError(f"prototype {j} out of range")
    _, _, record = model.forward(x)
    grid = record.patch_acts[j]
    values = _upscale(grid, model.config.height, model.config.width)
    return AttributionMap(values=values, prototype=j, image_id=record.image_id, grid=grid)


def _threshold_components(values: np.ndarray) -> tuple[np.ndarray, int]:
    thr = np.percentile(values, 95.0, method="linear")
    # ties included so constant maps keep a nonempty region; zero-value
    # pixels carry no mass and never count, even when the threshold is 0
    binary = (values >= thr) & (values > 0)
    return ndimage.label(binary, structure=FOUR_CONN)


def _box_mass(values: np.ndarray, boxes) -> float:
    covered = np.zeros(values.shape, dtype=bool)
    for top, left, bottom, right in boxes:
        covered[top:bottom, left:right] = True
    return float(values[covered].sum())


def extract_cutout(model: PartProtoNet, amap: AttributionMap,
                   x: ImageExample | np.ndarray, scope: int | str = "ALL") -> CutOut:
    """Boxes enclosing >=95% of the activation-area mass.

    Thresholding at the 95th percentile finds the activation areas; each
    disconnected area seeds one box at its peak cell. Boxes then grow
    greedily, each step extending whichever box edge adds the most mass,
    until the union encloses 95% of the mass inside the activation areas.
    The denominator is the thresholded mass, not the whole map: a box
    around a peak should crop the part the prototype fires on, and the
    near-zero background outside the areas would otherwise force the
    boxes to swallow the entire image whenever the map has heavy tails.
    The cut-out's latent patches are the grid cells whose receptive
    fields intersect any box."""
    values = amap.values
    if float(values.sum()) <= 0:
        raise ExplainError("attribution map has zero total mass")
    labels, n = _threshold_components(values)
    total = float(values[labels > 0].sum())
    boxes = []
    order = []
    for comp in range(1, n + 1):
        ys, xs = np.nonzero(labels == comp)
        peak = np.argmax(values[ys, xs])
        boxes.append([ys[peak], xs[peak], ys[peak] + 1, xs[peak] + 1])
        order.append(float(values[ys[peak], xs[peak]]))
    boxes = [b for _, b in sorted(zip(order, boxes), key=lambda t: -t[0])]

    h, w = values.shape
    while _box_mass(values, boxes) < 0.95 * total:
        best_gain, best = -1.0, None
        for b in boxes:
            top, left, bottom, right = b
            moves = []
            if top > 0:
                moves.append((float(values[top - 1, left:right].sum()), b, (top - 1, left, bottom, right)))
            if bottom < h:
                moves.append((float(values[bottom, left:right].sum()), b, (top, left, bottom + 1, right)))
            if left > 0:
                moves.append((float(values[top:bottom, left - 1].sum()), b, (top, left - 1, bottom, right)))
            if right < w:
                moves.append((float(values[top:bottom, right].sum()), b, (top, left, bottom, right + 1)))
            for gain, box, new in moves:
                if gain > best_gain:
                    best_gain, best = gain, (box, new)
        if best is None:
            break
        box, new = best
        box[0], box[1], box[2], box[3] = new

    final = [tuple(int(v) for v in b) for b in boxes]
    z = model.embed(x).data
    cells = []
    for i in range(model.latent_h):
        for j in range(model.latent_w):
            rt, rl, rb, rr = model.receptive_field(i, j)
            for top, left, bottom, right in final:
                if rt < bottom and rb > top and rl < right and rr > left:
                    cells.append((i, j))
                    break
    if not cells:
        # a box confined to pixels outside every receptive field: fall back
        # to the grid argmax so the patch set is never empty
        cells = [divmod(int(np.argmax(amap.grid)), amap.grid.shape[1])]
    return CutOut(image_id=amap.image_id, boxes=final, scope=scope,
                  patches=np.stack([z[i, j].copy() for i, j in cells]))


def top_activated(model: PartProtoNet, examples: list[ImageExample], j: int,
                  a: int) -> list[tuple[ImageExample, float]]:
    """The a examples with the highest image-level activation of prototype j,
    descending; equal activations order by image id."""
    acts, _ = image_activations(model, examples)
    scored = sorted(zip(examples, acts[:, j]), key=lambda t: (-t[1], t[0].id))
    return [(ex, float(v)) for ex, v in scored[:a]]


def image_activations(model: PartProtoNet, examples: list[ImageExample],
                      batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """(n, k) image-level activations and (n, k) flat argmax patch indices."""
    n = len(examples)
    acts = np.empty((n, model.config.k))
    args = np.empty((n, model.config.k), dtype=np.int64)
    for lo in range(0, n, batch_size):
        chunk = examples[lo:lo + batch_size]
        xs = np.stack([e.pixels for e in chunk])
        z = model.embed_np(xs)
        flat = z.reshape(len(chunk) * model.n_patches, model.config.d_latent)
        pp = (model.prototypes.data ** 2).sum(axis=1)[:, None]
        qq = (flat ** 2).sum(axis=1)[None, :]
        d2 = np.maximum(pp + qq - 2.0 * model.prototypes.data @ flat.T, 0.0)
        amat = model.act_from_sqdist(d2).reshape(model.config.k, len(chunk), model.n_patches)
        acts[lo:lo + len(chunk)] = amat.max(axis=2).T
        args[lo:lo + len(chunk)] = amat.argmax(axis=2).T
    return acts, args


def display_patches(amap: AttributionMap, x: ImageExample,
                    min_area: int = 200) -> list[DisplayPatch]:
    """The user-facing highlight: binarize the map at its 95th percentile
    (ties included), take 4-connected components, drop those smaller than
    min_area pixels, and return each with a traced contour and an overlay."""
    labels, n = _threshold_components(amap.values)
    out = []
    vmax = amap.values.max()
    heat = amap.values / vmax if vmax > 0 else amap.values
    for comp in range(1, n + 1):
        pixels = labels == comp
        area = int(pixels.sum())
        if area < min_area:
            continue
        overlay = (x.pixels * 255).astype(np.float64)
        red = np.zeros_like(overlay)
        red[..., 0] = 255.0
        blend = np.where(pixels[..., None], 0.5 * overlay + 0.5 * red * heat[..., None], overlay)
        out.append(DisplayPatch(image_id=x.id, contours=[_trace_contour(pixels)],
                                area=area, overlay=np.clip(blend, 0, 255).astype(np.uint8),
                                pixels=pixels))
    return out


def _trace_contour(pixels: np.ndarray) -> list[tuple[int, int]]:
    """Moore boundary tracing: ordered boundary pixels of one component."""
    ys, xs = np.nonzero(pixels)
    start = (int(ys[0]), int(xs[0]))  # topmost-leftmost
    # directions clockwise starting from west
    dirs = [(0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1)]

    def inside(p):
        return 0 <= p[0] < pixels.shape[0] and 0 <= p[1] < pixels.shape[1] and pixels[p]

    contour = [start]
    prev_dir = 0
    cur = start
    while True:
        found = False
        for step in range(8):
            d = (prev_dir + step) % 8
            nxt = (cur[0] + dirs[d][0], cur[1] + dirs[d][1])
            if inside(nxt):
                contour.append(nxt)
                cur = nxt
                prev_dir = (d + 5) % 8  # backtrack + 1, standard Moore restart
                found = True
                break
        if not found:
            break  # isolated pixel
        if cur == start and len(contour) > 2:
            contour.pop()
            break
        if len(contour) > 4 * pixels.size:
            break
    return contour


def input_gradient(model: PartProtoNet, x: ImageExample | np.ndarray, y: int) -> np.ndarray:
    """d p(y|x) / d pixels, computed through the whole network."""
    pixels = x.pixels if isinstance(x, ImageExample) else np.asarray(x, dtype=np.float64)
    xt = ad.Tensor(pixels[None], requires_grad=True)
    fwd = model.forward_batch_t(xt)
    flat = fwd.logits[0, :]
    m = ad.amax(flat)
    lse = ad.add(ad.log(ad.tsum(ad.exp(ad.sub(flat, m)))), m)
    prob = ad.exp(ad.sub(flat[y], lse))
    prob.backward()
    return xt.grad[0] if xt.grad is not None else np.zeros_like(pixels)


def prototype_activation_precision(model: PartProtoNet, examples: list[ImageExample],
                                   tau: float = 5.0, variant: str = "modified") -> np.ndarray:
    """Per-prototype AP over the masked examples of the prototype's class."""
    aps = np.full(model.config.k, np.nan)
    by_class: dict[int, list[ImageExample]] = {}
    for ex in examples:
        if ex.mask is not None:
            by_class.setdefault(ex.label, []).append(ex)
    for j in range(model.config.k):
        exs = by_class.get(model.class_of_prototype(j), [])
        if not exs:
            continue
        maps = [attribution(model, j, ex).values for ex in exs]
        masks = [ex.mask for ex in exs]
        aps[j] = activation_precision(maps, masks, tau=tau, variant=variant)
    return aps


# -- cut-out serialization ----------------------------------------------------


def cutout_to_json(c: CutOut) -> str:
    return json.dumps({
        "image_id": c.image_id,
        "boxes": [list(b) for b in c.boxes],
        "scope": c.scope,
        "patches_shape": list(c.patches.shape),
        "patches_b64": base64.b64encode(
            np.ascontiguousarray(c.patches, dtype="<f8").tobytes()).decode(),
    }, sort_keys=True)


def cutout_from_json(s: str) -> CutOut:
    d = json.loads(s)
    patches = np.frombuffer(base64.b64decode(d["patches_b64"]), dtype="<f8")
    return CutOut(image_id=d["image_id"],
                  boxes=[tuple(b) for b in d["boxes"]],
                  scope=d["scope"],
                  patches=patches.reshape(d["patches_shape"]).copy())
