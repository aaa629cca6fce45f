"""Single-file tensor container I/O and GPT-2 checkpoint mapping.

Container layout: an 8-byte little-endian unsigned header length N, N bytes of
UTF-8 JSON mapping tensor names to ``{"dtype", "shape", "data_offsets"}``
(plus an optional ``"__metadata__"`` string map), then the raw little-endian
data blob.  This is the layout used by public GPT-2 ``model.safetensors``
checkpoints.
"""

from __future__ import annotations

import json
import os
import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelFingerprint, Params, fingerprint  # noqa: F401  (re-exported)


class LoadError(ValueError):
    pass


DTYPES = {
    "F64": np.dtype("<f8"),
    "F32": np.dtype("<f4"),
    "F16": np.dtype("<f2"),
    "BF16": np.dtype("<u2"),
    "I64": np.dtype("<i8"),
    "I32": np.dtype("<i4"),
    "I16": np.dtype("<i2"),
    "I8": np.dtype("i1"),
    "U8": np.dtype("u1"),
    "BOOL": np.dtype("?"),
}
DTYPE_NAMES = {np.dtype("<f8"): "F64", np.dtype("<f4"): "F32", np.dtype("<f2"): "F16"}

# width -> heads for the public GPT-2 family, used when a checkpoint has no metadata
GPT2_HEADS = {768: 12, 1024: 16, 1280: 20, 1600: 25}


@dataclass(frozen=True)
class ManifestEntry:
    name: str
    dtype: str
    shape: tuple[int, ...]
    start: int
    end: int


@dataclass
class TensorManifest:
    entries: dict[str, ManifestEntry]
    metadata: dict[str, str]
    data_start: int

    def describe(self) -> dict[str, tuple[str, tuple[int, ...]]]:
        return {k: (e.dtype, e.shape) for k, e in sorted(self.entries.items())}


def read_manifest(path: str | os.PathLike) -> TensorManifest:
    with open(path, "rb") as f:
        head = f.read(8)
        if len(head) < 8:
            raise LoadError(f"{path}: file too short for a header length")
        (n,) = struct.unpack("<Q", head)
        size = os.fstat(f.fileno()).st_size
        if n > size - 8:
            raise LoadError(f"{path}: header length {n} exceeds file size {size}")
        raw = f.read(n)
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise LoadError(f"{path}: malformed header: {exc}") from None
    if not isinstance(header, dict):
        raise LoadError(f"{path}: header is not an object")
    metadata = header.pop("__metadata__", None) or {}
    blob = size - 8 - n
    entries = {}
    spans = []
    for name, info in header.items():
        try:
            dtype = info["dtype"]
            shape = tuple(int(s) for s in info["shape"])
            start, end = (int(o) for o in info["data_offsets"])
        except (KeyError, TypeError, ValueError):
            raise LoadError(f"{path}: tensor {name!r} has a malformed manifest entry") from None
        if dtype not in DTYPES:
            raise LoadError(f"{path}: tensor {name!r} has unsupported dtype {dtype}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * DTYPES[dtype].itemsize
        if not (0 <= start <= end <= blob) or end - start != nbytes:
            raise LoadError(f"{path}: tensor {name!r} offsets [{start}, {end}) inconsistent with shape {shape} or data size {blob}")
        entries[name] = ManifestEntry(name, dtype, shape, start, end)
        spans.append((start, end, name))
    spans.sort()
    for (s0, e0, n0), (s1, e1, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise LoadError(f"{path}: tensors {n0!r} and {n1!r} overlap")
    return TensorManifest(entries, metadata, 8 + n)


def read_tensors(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    manifest = read_manifest(path)
    out = {}
    with open(path, "rb") as f:
        for name, e in manifest.entries.items():
            f.seek(manifest.data_start + e.start)
            buf = f.read(e.end - e.start)
            if len(buf) != e.end - e.start:
                raise LoadError(f"{path}: tensor {name!r} is truncated")
            arr = np.frombuffer(buf, dtype=DTYPES[e.dtype]).reshape(e.shape)
            if e.dtype == "BF16":
                arr = (arr.astype(np.uint32) << 16).view(np.float32)
            out[name] = arr.copy()
    return out, manifest.metadata


def write_tensors(path: str | os.PathLike, tensors: dict[str, np.ndarray], metadata: dict[str, str] | None = None) -> None:
    header: dict = {}
    if metadata:
        header["__metadata__"] = {str(k): str(v) for k, v in metadata.items()}
    offset = 0
    blobs = []
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder not in "|" else arr.dtype
        if dt not in DTYPE_NAMES:
            raise ValueError(f"{name}: cannot store dtype {arr.dtype}")
        data = np.ascontiguousarray(arr, dtype=dt).tobytes()
        header[name] = {"dtype": DTYPE_NAMES[dt], "shape": list(arr.shape), "data_offsets": [offset, offset + len(data)]}
        blobs.append(data)
        offset += len(data)
    raw = json.dumps(header, separators=(",", ":")).encode("utf-8")
    raw += b" " * (-len(raw) % 8)
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as f:
        f.write(struct.pack("<Q", len(raw)))
        f.write(raw)
        for b in blobs:
            f.write(b)
    os.replace(tmp, path)


# --- GPT-2 naming ----------------------------------------------------------

_BLOCK_RE = re.compile(r"^h\.(\d+)\.(.+)$")
_IGNORED = re.compile(r"^(h\.\d+\.attn\.(bias|masked_bias)|lm_head\.weight)$")
_BLOCK_NAMES = {
    "ln_1.weight", "ln_1.bias", "attn.c_attn.weight", "attn.c_attn.bias", "attn.c_proj.weight",
    "attn.c_proj.bias", "ln_2.weight", "ln_2.bias", "mlp.c_fc.weight", "mlp.c_fc.bias",
    "mlp.c_proj.weight", "mlp.c_proj.bias",
}


def _strip(name: str) -> str:
    return name[len("transformer."):] if name.startswith("transformer.") else name


def infer_config(tensors: dict[str, np.ndarray], metadata: dict[str, str], path: str | os.PathLike | None = None) -> ModelConfig:
    names = {_strip(k): v for k, v in tensors.items()}
    for req in ("wte.weight", "wpe.weight", "ln_f.weight"):
        if req not in names:
            raise LoadError(f"missing tensor {req!r}")
    vocab, d_model = names["wte.weight"].shape
    max_seq = names["wpe.weight"].shape[0]
    layers = sorted({int(m.group(1)) for k in names if (m := _BLOCK_RE.match(k))})
    if layers != list(range(len(layers))) or not layers:
        raise LoadError(f"block indices are not contiguous from 0: {layers}")
    n_head = None
    ln_eps = 1e-5
    if "n_head" in metadata:
        n_head = int(metadata["n_head"])
        ln_eps = float(metadata.get("ln_eps", ln_eps))
    elif path is not None and (Path(path).parent / "config.json").exists():
        hf = json.loads((Path(path).parent / "config.json").read_text())
        n_head = int(hf.get("n_head", 0)) or None
        ln_eps = float(hf.get("layer_norm_epsilon", ln_eps))
    if n_head is None:
        n_head = GPT2_HEADS.get(d_model)
    if n_head is None:
        raise LoadError(f"cannot infer n_head for width {d_model}; add metadata or a config.json")
    d_mlp = names["h.0.mlp.c_fc.weight"].shape[1] if "h.0.mlp.c_fc.weight" in names else 4 * d_model
    return ModelConfig(len(layers), n_head, d_model, vocab, max_seq=max_seq, d_mlp=d_mlp, ln_eps=ln_eps)


def from_gpt2_tensors(tensors: dict[str, np.ndarray], config: ModelConfig, dtype=np.float32) -> Params:
    """Map GPT-2 checkpoint tensors onto engine parameters.

    GPT-2 stores projections as ``[in, out]`` (x @ W), which is the engine's
    convention too; the fused QKV projection is split per head and the
    unembedding is the transposed token embedding.
    """
    D, H, dh = config.d_model, config.n_head, config.d_head
    names = {}
    for k, v in tensors.items():
        s = _strip(k)
        if _IGNORED.match(s):
            continue
        m = _BLOCK_RE.match(s)
        if m:
            if m.group(2) not in _BLOCK_NAMES:
                raise LoadError(f"unknown tensor name {k!r}")
            if int(m.group(1)) >= config.n_layer:
                raise LoadError(f"tensor {k!r} refers to a layer beyond n_layer={config.n_layer}")
        elif s not in ("wte.weight", "wpe.weight", "ln_f.weight", "ln_f.bias"):
            raise LoadError(f"unknown tensor name {k!r}")
        names[s] = np.asarray(v, dtype=np.float64)

    def get(name: str, shape: tuple[int, ...]) -> np.ndarray:
        if name not in names:
            raise LoadError(f"missing tensor {name!r}")
        arr = names[name]
        if arr.shape != shape:
            raise LoadError(f"tensor {name!r} has shape {arr.shape}, expected {shape} for {config.summary()}")
        return arr

    out = {
        "embed.W_E": get("wte.weight", (config.vocab_size, D)),
        "embed.W_pos": get("wpe.weight", (config.max_seq, D)),
        "ln_final.w": get("ln_f.weight", (D,)),
        "ln_final.b": get("ln_f.bias", (D,)),
    }
    out["unembed.W_U"] = out["embed.W_E"].T
    M = config.d_mlp
    for l in range(config.n_layer):
        g, p = f"h.{l}.", f"blocks.{l}."
        w = get(g + "attn.c_attn.weight", (D, 3 * D))
        b = get(g + "attn.c_attn.bias", (3 * D,))
        for i, c in enumerate("QKV"):
            wc = w[:, i * D:(i + 1) * D].reshape(D, H, dh)
            out[p + f"attn.W_{c}"] = wc.transpose(1, 0, 2)
            out[p + f"attn.b_{c}"] = b[i * D:(i + 1) * D].reshape(H, dh)
        out[p + "attn.W_O"] = get(g + "attn.c_proj.weight", (D, D)).reshape(H, dh, D)
        out[p + "attn.b_O"] = get(g + "attn.c_proj.bias", (D,))
        out[p + "ln1.w"] = get(g + "ln_1.weight", (D,))
        out[p + "ln1.b"] = get(g + "ln_1.bias", (D,))
        out[p + "ln2.w"] = get(g + "ln_2.weight", (D,))
        out[p + "ln2.b"] = get(g + "ln_2.bias", (D,))
        out[p + "mlp.W_in"] = get(g + "mlp.c_fc.weight", (D, M))
        out[p + "mlp.b_in"] = get(g + "mlp.c_fc.bias", (M,))
        out[p + "mlp.W_out"] = get(g + "mlp.c_proj.weight", (M, D))
        out[p + "mlp.b_out"] = get(g + "mlp.c_proj.bias", (D,))
    return Params(config, {k: v.astype(dtype) for k, v in out.items()})


def to_gpt2_tensors(params: Params) -> dict[str, np.ndarray]:
    """Inverse of :func:`from_gpt2_tensors`; an untied unembedding is stored as ``lm_head.weight``."""
    cfg = params.config
    D = cfg.d_model
    out = {
        "wte.weight": params["embed.W_E"],
        "wpe.weight": params["embed.W_pos"],
        "ln_f.weight": params["ln_final.w"],
        "ln_f.bias": params["ln_final.b"],
    }
    if not np.array_equal(params["unembed.W_U"], params["embed.W_E"].T):
        out["lm_head.weight"] = params["unembed.W_U"].T
    for l in range(cfg.n_layer):
        g, p = f"h.{l}.", f"blocks.{l}."
        out[g + "attn.c_attn.weight"] = np.concatenate(
            [params[p + f"attn.W_{c}"].transpose(1, 0, 2).reshape(D, D) for c in "QKV"], axis=1
        )
        out[g + "attn.c_attn.bias"] = np.concatenate([params[p + f"attn.b_{c}"].reshape(D) for c in "QKV"])
        out[g + "attn.c_proj.weight"] = params[p + "attn.W_O"].reshape(D, D)
        out[g + "attn.c_proj.bias"] = params[p + "attn.b_O"]
        out[g + "ln_1.weight"] = params[p + "ln1.w"]
        out[g + "ln_1.bias"] = params[p + "ln1.b"]
        out[g + "ln_2.weight"] = params[p + "ln2.w"]
        out[g + "ln_2.bias"] = params[p + "ln2.b"]
        out[g + "mlp.c_fc.weight"] = params[p + "mlp.W_in"]
        out[g + "mlp.c_fc.bias"] = params[p + "mlp.b_in"]
        out[g + "mlp.c_proj.weight"] = params[p + "mlp.W_out"]
        out[g + "mlp.c_proj.bias"] = params[p + "mlp.b_out"]
    return {k: np.ascontiguousarray(v) for k, v in out.items()}


def load_weights(path: str | os.PathLike, dtype=np.float32) -> tuple[ModelConfig, Params]:
    tensors, metadata = read_tensors(path)
    config = infer_config(tensors, metadata, path)
    stripped = {_strip(k): v for k, v in tensors.items()}
    params = from_gpt2_tensors(tensors, config, dtype=dtype)
    if "lm_head.weight" in stripped:
        head = stripped["lm_head.weight"]
        if head.shape != (config.vocab_size, config.d_model):
            raise LoadError(f"tensor 'lm_head.weight' has shape {head.shape}")
        params = params.with_arrays({"unembed.W_U": head.T.astype(dtype)})
    return config, params


def save_weights(path: str | os.PathLike, params: Params, metadata: dict[str, str] | None = None) -> None:
    meta = {"format": "pt", "n_head": str(params.config.n_head), "ln_eps": repr(params.config.ln_eps)}
    meta.update(metadata or {})
    write_tensors(path, to_gpt2_tensors(params), meta)

