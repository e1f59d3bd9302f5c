"""File formats: IDX image/label corpora, checkpoints, CSV exports."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .codebook import Codebook
from .lut import LookupTable, Model, UsageHistogram, build_lut
from .network import spec_from_manifest, spec_to_manifest

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

CKPT_MAGIC = b"PECANCKP"
CKPT_VERSION = 1

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def _open_maybe_gzip(path: Path):
    with open(path, "rb") as f:
        head = f.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise ValueError(f"truncated file: wanted {n} bytes for {what}, got {len(buf)}")
    return buf


def load_idx_images(path) -> np.ndarray:
    """Big-endian IDX image file to float64 [N, h, w], pixel values / 255."""
    path = Path(path)
    with _open_maybe_gzip(path) as f:
        magic, n, h, w = struct.unpack(">IIII", _read_exact(f, 16, "image header"))
        if magic != IDX_IMAGES_MAGIC:
            raise ValueError(f"bad magic 0x{magic:08x} in {path}, expected 0x{IDX_IMAGES_MAGIC:08x}")
        raw = _read_exact(f, n * h * w, f"{n} images of {h}x{w}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(n, h, w).astype(np.float64) / 255.0


def load_idx_labels(path) -> np.ndarray:
    """Big-endian IDX label file to int64 [N]."""
    path = Path(path)
    with _open_maybe_gzip(path) as f:
        magic, n = struct.unpack(">II", _read_exact(f, 8, "label header"))
        if magic != IDX_LABELS_MAGIC:
            raise ValueError(f"bad magic 0x{magic:08x} in {path}, expected 0x{IDX_LABELS_MAGIC:08x}")
        raw = _read_exact(f, n, f"{n} labels")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def save_idx_images(path, images: np.ndarray):
    """Write uint8 images [N, h, w] in IDX layout (the load_idx inverse)."""
    images = np.asarray(images)
    if images.ndim != 3 or images.dtype != np.uint8:
        raise ValueError(f"expected uint8 [N, h, w], got {images.dtype} {images.shape}")
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        f.write(images.tobytes())


def save_idx_labels(path, labels: np.ndarray):
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.dtype != np.uint8:
        raise ValueError(f"expected uint8 [N], got {labels.dtype} {labels.shape}")
    with open(path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


# the canonical handwritten-digit mean/std, applied after the /255 scaling.
# Feeding standardized pixels matters beyond convention here: the attention
# scores are raw dot products, so shrinking the input scale flattens the
# softmax and the blended reconstructions lose their sample dependence.
PIXEL_MEAN = 0.1307
PIXEL_STD = 0.3081


def load_digit_corpus(data_dir) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Load the four canonical IDX files from a directory.

    Accepts plain or .gz files under the usual names. Returns
    (train_x [N,1,28,28], train_y, test_x, test_y) with pixels scaled to
    [0, 1] and then standardized by (PIXEL_MEAN, PIXEL_STD).
    """
    data_dir = Path(data_dir)

    def find(stem: str) -> Path:
        for cand in (data_dir / stem, data_dir / (stem + ".gz")):
            if cand.exists():
                return cand
        raise FileNotFoundError(f"missing {stem}[.gz] under {data_dir}")

    tx = load_idx_images(find(MNIST_FILES["train_images"]))
    ty = load_idx_labels(find(MNIST_FILES["train_labels"]))
    ex = load_idx_images(find(MNIST_FILES["test_images"]))
    ey = load_idx_labels(find(MNIST_FILES["test_labels"]))
    for x, y, split in ((tx, ty, "train"), (ex, ey, "test")):
        if x.shape[0] != y.shape[0]:
            raise ValueError(f"{split} split: {x.shape[0]} images vs {y.shape[0]} labels")
    tx = (tx - PIXEL_MEAN) / PIXEL_STD
    ex = (ex - PIXEL_MEAN) / PIXEL_STD
    return tx[:, None, :, :], ty, ex[:, None, :, :], ey


# checkpoint container ------------------------------------------------------


@dataclass
class Checkpoint:
    """Manifest (string key/values) plus named float32 blobs."""

    manifest: dict[str, str]
    blobs: dict[str, np.ndarray] = field(default_factory=dict)


def save_checkpoint(ck: Checkpoint, path):
    """Serialize: magic, version, manifest text, then length-prefixed blobs.

    Keys and blob names are written sorted, so identical contents give
    identical bytes.
    """
    lines = []
    for key in sorted(ck.manifest):
        if "=" in key or "\n" in key or not key:
            raise ValueError(f"bad manifest key {key!r}")
        val = str(ck.manifest[key])
        if "\n" in val:
            raise ValueError(f"manifest value for {key!r} contains a newline")
        lines.append(f"{key}={val}")
    text = ("\n".join(lines) + "\n").encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        f.write(struct.pack("<Q", len(text)))
        f.write(text)
        f.write(struct.pack("<I", len(ck.blobs)))
        for name in sorted(ck.blobs):
            arr = np.ascontiguousarray(ck.blobs[name], dtype=np.float32)
            enc = name.encode("utf-8")
            f.write(struct.pack("<Q", len(enc)))
            f.write(enc)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.astype("<f4").tobytes())


def load_checkpoint(path) -> Checkpoint:
    """Parse and validate a checkpoint file; see save_checkpoint for layout."""
    with open(path, "rb") as f:
        if _read_exact(f, 8, "magic") != CKPT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != CKPT_VERSION:
            raise ValueError(f"checkpoint version {version} unsupported, expected {CKPT_VERSION}")
        (mlen,) = struct.unpack("<Q", _read_exact(f, 8, "manifest length"))
        manifest: dict[str, str] = {}
        for ln, line in enumerate(_read_exact(f, mlen, "manifest").decode("utf-8").splitlines(), 1):
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"manifest line {ln} has no '=': {line!r}")
            key, val = line.split("=", 1)
            if key in manifest:
                raise ValueError(f"duplicate manifest key {key!r}")
            manifest[key] = val
        (n_blobs,) = struct.unpack("<I", _read_exact(f, 4, "blob count"))
        blobs: dict[str, np.ndarray] = {}
        for _ in range(n_blobs):
            (nlen,) = struct.unpack("<Q", _read_exact(f, 8, "blob name length"))
            name = _read_exact(f, nlen, "blob name").decode("utf-8")
            if name in blobs:
                raise ValueError(f"duplicate blob {name!r}")
            (ndim,) = struct.unpack("<I", _read_exact(f, 4, f"{name} ndim"))
            if ndim > 32:
                raise ValueError(f"blob {name!r} claims {ndim} dimensions")
            shape = struct.unpack(f"<{ndim}Q", _read_exact(f, 8 * ndim, f"{name} shape"))
            count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            raw = _read_exact(f, 4 * count, f"{name} data ({count} floats)")
            blobs[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
        trailing = f.read(1)
        if trailing:
            raise ValueError("checkpoint has trailing bytes after the last blob")
    return Checkpoint(manifest, blobs)


def model_to_checkpoint(model: Model, extra: dict[str, str] | None = None, include_luts: bool = False) -> Checkpoint:
    """Snapshot a model: params, codebook groups, optionally derived tables."""
    manifest = spec_to_manifest(model.spec)
    if extra:
        manifest.update({str(k): str(v) for k, v in extra.items()})
    blobs: dict[str, np.ndarray] = {k: v for k, v in model.params.items()}
    for name, cb in model.codebooks.items():
        manifest[f"codebook.{name}.groups"] = str(cb.D)
        for j, g in enumerate(cb.groups):
            blobs[f"{name}.codebook.g{j}"] = g
    if include_luts:
        for ly in model.spec.param_layers():
            if ly.method != "baseline":
                table = model.lut_for(ly)
                manifest[f"lut.{ly.name}.groups"] = str(table.D)
                for j, g in enumerate(table.groups):
                    blobs[f"{ly.name}.lut.g{j}"] = g
    return Checkpoint(manifest, blobs)


def model_from_checkpoint(ck: Checkpoint, lut_tol: float = 1e-4) -> Model:
    """Rebuild a model, verifying any stored tables against a fresh build.

    Stored blobs are float32; tables are rebuilt in float64 from the
    (quantized) weights and codebooks, so agreement is checked at lut_tol
    rather than machine epsilon.
    """
    spec = spec_from_manifest(ck.manifest)
    params: dict[str, np.ndarray] = {}
    for ly in spec.param_layers():
        for field_name in ("weight", "bias"):
            key = f"{ly.name}.{field_name}"
            if key not in ck.blobs:
                raise ValueError(f"checkpoint is missing blob {key!r}")
            params[key] = ck.blobs[key].astype(np.float64)
    codebooks: dict[str, Codebook] = {}
    luts: dict[str, LookupTable] = {}
    for ly in spec.param_layers():
        if ly.method == "baseline":
            continue
        gkey = f"codebook.{ly.name}.groups"
        if gkey not in ck.manifest:
            raise ValueError(f"checkpoint is missing {gkey!r} for pecan layer {ly.name}")
        n_groups = int(ck.manifest[gkey])
        groups = []
        for j in range(n_groups):
            bkey = f"{ly.name}.codebook.g{j}"
            if bkey not in ck.blobs:
                raise ValueError(f"checkpoint is missing blob {bkey!r}")
            groups.append(ck.blobs[bkey].astype(np.float64))
        codebooks[ly.name] = Codebook(groups)
        lkey = f"lut.{ly.name}.groups"
        if lkey in ck.manifest:
            tg = [ck.blobs[f"{ly.name}.lut.g{j}"].astype(np.float64) for j in range(int(ck.manifest[lkey]))]
            table = LookupTable(tg)
            fresh = build_lut(params[f"{ly.name}.weight"], codebooks[ly.name])
            worst = max(float(np.abs(a - b).max()) for a, b in zip(table.groups, fresh.groups))
            if worst > lut_tol:
                raise ValueError(f"stored table for {ly.name} deviates {worst:g} from rebuild (tol {lut_tol:g})")
            luts[ly.name] = table
    # surface unknown blobs early rather than silently dropping data
    known = set(params)
    for name, cb in codebooks.items():
        known |= {f"{name}.codebook.g{j}" for j in range(cb.D)}
    for name, table in luts.items():
        known |= {f"{name}.lut.g{j}" for j in range(table.D)}
    stray = set(ck.blobs) - known
    if stray:
        raise ValueError(f"checkpoint has unrecognized blobs: {sorted(stray)}")
    return Model(spec, params, codebooks, luts)


# CSV emission ---------------------------------------------------------------


def usage_csv(usages: dict[str, UsageHistogram]) -> str:
    lines = ["layer,group,prototype,count"]
    for name in sorted(usages):
        hist = usages[name]
        for j, counts in enumerate(hist.counts):
            for m, cnt in enumerate(counts):
                lines.append(f"{name},{j},{m},{int(cnt)}")
    return "\n".join(lines) + "\n"


def cost_csv(rows, hw=None) -> str:
    hdr = "layer,adds,muls" + (",cycles,power" if hw else "")
    lines = [hdr]
    for r in rows:
        line = f"{r.name},{r.adds},{r.muls}"
        if hw:
            line += f",{hw.latency_cycles(r.adds, r.muls)},{hw.power_units(r.adds, r.muls)}"
        lines.append(line)
    return "\n".join(lines) + "\n"
