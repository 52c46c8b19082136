"""Synthetic fixtures: rendered napping-sheet photos and planted flavor spaces."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from feast.data_model import EmbeddingTable, StickerAnnotation, WineRecord
from feast.digitizer import RasterImage, apply_homography

STICKER_RGB = {
    "red": (220, 30, 30),
    "yellow": (230, 210, 30),
    "green": (30, 170, 60),
    "blue": (30, 60, 220),
    "purple": (140, 40, 200),
}
SHEET_RGB = np.array([245.0, 245.0, 240.0])
BACKGROUND_RGB = np.array([35.0, 35.0, 40.0])


@dataclass
class RenderedSheet:
    image: RasterImage
    centers: dict  # color -> (x, y) in canonical sheet pixels
    sheet_to_photo: np.ndarray
    corners: np.ndarray


def camera_homography(sheet_w, sheet_h, photo_w, photo_h, tilt_x_deg, tilt_y_deg, roll_deg, fill=0.7):
    """Pinhole view of the canonical sheet plane after tilting the camera."""
    ax, ay, az = np.deg2rad([tilt_x_deg, tilt_y_deg, roll_deg])
    Rx = np.array([[1, 0, 0], [0, np.cos(ax), -np.sin(ax)], [0, np.sin(ax), np.cos(ax)]])
    Ry = np.array([[np.cos(ay), 0, np.sin(ay)], [0, 1, 0], [-np.sin(ay), 0, np.cos(ay)]])
    Rz = np.array([[np.cos(az), -np.sin(az), 0], [np.sin(az), np.cos(az), 0], [0, 0, 1]])
    R = Rz @ Ry @ Rx
    f = 1.5 * max(photo_w, photo_h)
    scale = fill * min(photo_w / sheet_w, photo_h / sheet_h)
    depth = f / scale  # at zero tilt one sheet pixel spans `scale` photo pixels
    center = np.array([[1, 0, -(sheet_w - 1) / 2], [0, 1, -(sheet_h - 1) / 2], [0, 0, 1]], dtype=float)
    extr = np.c_[R[:, 0], R[:, 1], np.array([0, 0, depth])]
    K = np.array([[f, 0, (photo_w - 1) / 2], [0, f, (photo_h - 1) / 2], [0, 0, 1]])
    G = K @ extr @ center
    return G / G[2, 2]


def render_sheet(
    centers: dict,
    *,
    sheet_size=(1050, 1485),
    photo_size=(1000, 1300),
    tilt=(0.0, 0.0),
    roll=0.0,
    radius=28.0,
    noise=0.0,
    seed=0,
    supersample=2,
) -> RenderedSheet:
    """Photograph a white sheet with colored disks centered at ``centers``."""
    sw, sh = sheet_size
    pw, ph = photo_size
    G = camera_homography(sw, sh, pw, ph, tilt[0], tilt[1], roll)
    Ginv = np.linalg.inv(G)
    acc = np.zeros((ph, pw, 3))
    offs = (np.arange(supersample) + 0.5) / supersample - 0.5
    ys, xs = np.mgrid[0:ph, 0:pw].astype(float)
    for oy in offs:
        for ox in offs:
            pts = np.c_[(xs + ox).ravel(), (ys + oy).ravel()]
            uv = apply_homography(Ginv, pts)
            u, v = uv[:, 0], uv[:, 1]
            col = np.tile(BACKGROUND_RGB, (len(u), 1))
            on_sheet = (u >= 0) & (u <= sw - 1) & (v >= 0) & (v <= sh - 1)
            col[on_sheet] = SHEET_RGB
            for color, (cx, cy) in centers.items():
                disk = on_sheet & ((u - cx) ** 2 + (v - cy) ** 2 <= radius * radius)
                col[disk] = STICKER_RGB[color]
            acc += col.reshape(ph, pw, 3)
    img = acc / supersample**2
    if noise > 0:
        img = img + np.random.default_rng(seed).normal(0.0, noise, img.shape)
    corners = apply_homography(G, np.array([[0, 0], [sw - 1, 0], [sw - 1, sh - 1], [0, sh - 1]], float))
    pixels = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return RenderedSheet(RasterImage(pixels), dict(centers), G, corners)


def random_centers(rng, colors=tuple(STICKER_RGB), sheet_size=(1050, 1485), margin=90.0, min_gap=90.0):
    sw, sh = sheet_size
    out = {}
    while len(out) < len(colors):
        p = rng.uniform([margin, margin], [sw - margin, sh - margin])
        if all(np.hypot(*(p - q)) >= min_gap for q in out.values()):
            out[colors[len(out)]] = (float(p[0]), float(p[1]))
    return out


def random_view(rng, max_tilt=30.0):
    """Tilt about both axes with total obliquity at most ``max_tilt`` degrees."""
    total = rng.uniform(0, max_tilt)
    phi = rng.uniform(0, 2 * np.pi)
    return (total * np.cos(phi), total * np.sin(phi)), float(rng.uniform(-10, 10))


def annotations_from_centers(centers: dict, legend: dict, key) -> list[StickerAnnotation]:
    ev, sess, no = key
    return [StickerAnnotation(ev, sess, no, legend[c], x, y, c) for c, (x, y) in centers.items()]


# --------------------------------------------------------------------------
# Planted flavor spaces
# --------------------------------------------------------------------------


def planted_configuration(n: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((n, 2))


def noisy_copy(X: np.ndarray, sigma_fraction: float, seed: int) -> np.ndarray:
    spread = np.sqrt(((X - X.mean(axis=0)) ** 2).sum(axis=1).mean())
    return X + np.random.default_rng(seed).normal(0.0, sigma_fraction * spread, X.shape)


def table_from_points(ids, X) -> EmbeddingTable:
    return EmbeddingTable(tuple(ids), np.asarray(X, dtype=float))


def records_from_positions(ids, X, seed: int) -> list[WineRecord]:
    """Wine attributes that vary smoothly with the planted flavor position."""
    rng = np.random.default_rng(seed)
    out = []
    countries = ("France", "Italy", "Spain", "Chile", "Germany", "Portugal", "Argentina", "USA")
    grapes = ("Merlot", "Pinot Noir", "Riesling", "Sangiovese", "Syrah", "Tempranillo")
    regions = ("North", "South", "East", "West")
    for wid, (x, y) in zip(ids, X):
        angle = (np.arctan2(y, x) + np.pi) / (2 * np.pi)
        out.append(WineRecord(
            vintage_id=int(wid) + 10000,
            experiment_id=int(wid),
            year=int(2000 + np.clip(round(10 + 4 * x + rng.normal(0, 1)), 0, 22)),
            country=countries[int(angle * len(countries)) % len(countries)],
            region=regions[int(x > 0) * 2 + int(y > 0)],
            price=float(np.exp(3 + 0.5 * y + rng.normal(0, 0.2))),
            rating=float(np.clip(3.8 + 0.3 * x + rng.normal(0, 0.1), 1, 5)),
            alcohol=float(np.clip(13 + 0.8 * y + rng.normal(0, 0.2), 8, 16)),
            grapes=(grapes[int((x + 3) / 6 * len(grapes)) % len(grapes)], "Merlot"),
        ))
    return out


# --------------------------------------------------------------------------
# On-disk fixture dataset
# --------------------------------------------------------------------------


def simulate_napping(X: np.ndarray, ids, n_sheets: int, seed: int, per_sheet: int = 5, noise: float = 0.1,
                     sheet_size=(1050, 1485)) -> list[StickerAnnotation]:
    """Tasters place ``per_sheet`` random wines at noisy, randomly rotated planted positions."""
    rng = np.random.default_rng(seed)
    colors = tuple(STICKER_RGB)
    spread = np.sqrt(((X - X.mean(0)) ** 2).sum(1).mean())
    out = []
    for s in range(n_sheets):
        pick = rng.choice(len(ids), size=per_sheet, replace=False)
        theta = rng.uniform(0, 2 * np.pi)
        R = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
        P = (X[pick] - X[pick].mean(0)) @ R.T + rng.normal(0, noise * spread, (per_sheet, 2))
        P = P / max(np.abs(P).max(), 1e-9) * 0.4 * min(sheet_size) + np.array(sheet_size) / 2
        for c, (r, (x, y)) in enumerate(zip(pick, P)):
            out.append(StickerAnnotation("event%d" % (s // 40), "round%d" % (s % 40), s, int(ids[r]),
                                         float(x), float(y), colors[c]))
    return out


def write_attributes(records, path) -> None:
    import csv

    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["vintage_id", "experiment_id", "year", "alcohol", "country", "region",
                    "price", "rating", "grape", "review", "image"])
        for r in records:
            w.writerow([r.vintage_id, "" if r.experiment_id is None else r.experiment_id,
                        "" if r.year is None else r.year, "" if r.alcohol is None else r.alcohol,
                        r.country or "", r.region or "", "" if r.price is None else r.price,
                        "" if r.rating is None else r.rating, ", ".join(r.grapes), r.review or "",
                        r.image_ref or ""])


def write_fixture_dataset(directory, n_wines: int = 40, n_sheets: int = 120, dim: int = 12, seed: int = 0):
    """napping.csv, attributes.csv and embeddings.csv drawn from one planted flavor space."""
    from pathlib import Path

    from feast.data_model import write_embeddings, write_napping

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    ids = tuple(range(100, 100 + n_wines))
    X = planted_configuration(n_wines, seed)
    write_napping(simulate_napping(X, ids, n_sheets, seed + 1), d / "napping.csv")
    write_attributes(records_from_positions(ids, X, seed + 2), d / "attributes.csv")
    rng = np.random.default_rng(seed + 3)
    lift = rng.standard_normal((2, dim))
    V = noisy_copy(X, 0.5, seed + 4) @ lift + rng.normal(0, 0.05, (n_wines, dim))
    write_embeddings(table_from_points(ids, V), d / "embeddings.csv")
    return ids, X
