"""On-disk formats: run configuration, datasets, observations, checkpoints,
and the append-only metrics log.

Every binary artifact starts with a 4-byte magic, a u32 format version, and
the 32-byte sha256 config fingerprint; loads validate all three.  All
integers and floats are little-endian.  The metrics log is line-oriented
JSON whose first record carries the same magic/version/fingerprint triple.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .channels import CorruptionChannel, MatrixDescriptor, Observation, pack_mask, unpack_mask
from .diffusion import DenoiserArch, DenoiserModel, NoiseSchedule
from .em import EMConfig, TrainConfig
from .optim import ParamStore
from .samplers import SamplerConfig

FORMAT_VERSION = 1
MAGIC_DATASET = b"DFEM"
MAGIC_OBSERVATIONS = b"DFEO"
MAGIC_CHECKPOINT = b"DFEC"
METRICS_MAGIC = "DFEL"

_CHANNEL_KINDS = ("fixed", "mask", "blur", "sphere")


# ---------------------------------------------------------------------------
# configuration


def _parse_bool(s: str) -> bool:
    if s in ("true", "1", "yes"):
        return True
    if s in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: '{s}'")


def _parse_int_tuple(s: str):
    return tuple(int(p) for p in s.split(",") if p.strip())


# key -> (parser, default).  A default of REQUIRED means the key must appear.
_REQUIRED = object()
CONFIG_SCHEMA = {
    "experiment.name": (str, "run"),
    "seed": (int, _REQUIRED),
    "channel.kind": (str, "sphere"),
    "channel.dim_x": (int, 5),
    "channel.dim_y": (int, 0),
    "channel.rows": (int, 2),
    "channel.sigma_y": (float, 1e-2),
    "channel.rho": (float, 0.5),
    "channel.kernel_sigma": (float, 2.0),
    "channel.height": (int, 8),
    "channel.width": (int, 8),
    "schedule.sigma0": (float, 1e-3),
    "schedule.sigma1": (float, 10.0),
    "schedule.squared_endpoints": (_parse_bool, False),
    "loss.alpha": (float, 3.5),
    "loss.beta": (float, 1.5),
    "model.hidden": (_parse_int_tuple, (256, 256, 256)),
    "model.embed_width": (int, 16),
    "em.iterations": (int, 8),
    "em.init": (str, "gaussian-prior"),
    "em.fresh_samples": (_parse_bool, False),
    "em.gaussian_init_iters": (int, 16),
    "em.mean_shift_init": (_parse_bool, True),
    "train.epochs": (int, 100),
    "train.batch_size": (int, 256),
    "train.lr_init": (float, 1e-3),
    "train.lr_final": (float, 1e-6),
    "train.clip_norm": (float, 1.0),
    "train.ema_decay": (float, 0.0),
    "train.warm": (_parse_bool, True),
    "sampler.kind": (str, "pc"),
    "sampler.steps": (int, 256),
    "sampler.corrector_steps": (int, 1),
    "sampler.snr": (float, 0.1),
    "sampler.readout": (str, "denoiser"),
    "data.n": (int, 8192),
    "data.sigma_y_sq": (float, 1e-4),
}

# keys that may change between a run and its resumed continuation
_FINGERPRINT_EXCLUDE = frozenset({"em.iterations"})


@dataclass(frozen=True)
class RunConfig:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    @property
    def seed(self) -> int:
        return self.values["seed"]

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule(
            sigma0=self["schedule.sigma0"], sigma1=self["schedule.sigma1"],
            squared_endpoints=self["schedule.squared_endpoints"],
        )

    def channel(self) -> CorruptionChannel:
        kind = self["channel.kind"]
        kw = dict(kind=kind, sigma_y=self["channel.sigma_y"])
        if kind == "mask":
            kw.update(dim_x=self["channel.dim_x"], rho=self["channel.rho"])
        elif kind == "sphere":
            kw.update(dim_x=self["channel.dim_x"], rows=self["channel.rows"])
        elif kind == "blur":
            h, w = self["channel.height"], self["channel.width"]
            kw.update(dim_x=h * w, height=h, width=w,
                      sigma_kernel=self["channel.kernel_sigma"])
        else:
            raise ValueError(
                "fixed channels need an explicit matrix; not configurable from file"
            )
        return CorruptionChannel(**kw)

    def sampler(self) -> SamplerConfig:
        return SamplerConfig(
            kind=self["sampler.kind"], steps=self["sampler.steps"],
            corrector_steps=self["sampler.corrector_steps"],
            snr=self["sampler.snr"], readout=self["sampler.readout"],
        )

    def train(self) -> TrainConfig:
        return TrainConfig(
            epochs=self["train.epochs"], batch_size=self["train.batch_size"],
            lr_init=self["train.lr_init"], lr_final=self["train.lr_final"],
            clip_norm=self["train.clip_norm"], alpha=self["loss.alpha"],
            beta=self["loss.beta"], ema_decay=self["train.ema_decay"],
            warm=self["train.warm"],
        )

    def em(self) -> EMConfig:
        return EMConfig(
            iterations=self["em.iterations"], init=self["em.init"],
            fresh_samples=self["em.fresh_samples"], sampler=self.sampler(),
            train=self.train(),
            gaussian_init_iters=self["em.gaussian_init_iters"],
            mean_shift_init=self["em.mean_shift_init"],
        )

    def fingerprint(self) -> bytes:
        """sha256 over the canonical key=value lines.

        em.iterations is excluded so a checkpoint can be resumed with a
        larger iteration budget.
        """
        lines = []
        for key in sorted(self.values):
            if key in _FINGERPRINT_EXCLUDE:
                continue
            v = self.values[key]
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{key}={v}")
        return hashlib.sha256("\n".join(lines).encode()).digest()


def parse_config_text(text: str, overrides: dict | None = None) -> RunConfig:
    """Parse 'key = value' lines; '#' starts a comment; unknown keys error."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got '{raw}'")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in CONFIG_SCHEMA:
            raise ValueError(f"line {lineno}: unknown config key '{key}'")
        if key in values:
            raise ValueError(f"line {lineno}: duplicate config key '{key}'")
        parser, _default = CONFIG_SCHEMA[key]
        try:
            values[key] = parser(val)
        except ValueError as exc:
            raise ValueError(f"line {lineno}: bad value for '{key}': {exc}") from exc
    if overrides:
        for key, val in overrides.items():
            if key not in CONFIG_SCHEMA:
                raise ValueError(f"unknown config key '{key}'")
            values[key] = val
    for key, (_parser, default) in CONFIG_SCHEMA.items():
        if key not in values:
            if default is _REQUIRED:
                raise ValueError(f"missing required config key '{key}'")
            values[key] = default
    return RunConfig(values)


def load_config(path, overrides: dict | None = None) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read(), overrides)


# ---------------------------------------------------------------------------
# low-level binary helpers


def _write_header(fh, magic: bytes, fingerprint: bytes):
    fh.write(magic)
    fh.write(struct.pack("<I", FORMAT_VERSION))
    fh.write(fingerprint)


def _read_header(fh, magic: bytes, fingerprint: bytes | None, path):
    got = fh.read(4)
    if got != magic:
        raise ValueError(f"{path}: bad magic {got!r}, expected {magic!r}")
    (version,) = struct.unpack("<I", fh.read(4))
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    fp = fh.read(32)
    if len(fp) != 32:
        raise ValueError(f"{path}: truncated header")
    if fingerprint is not None and fp != fingerprint:
        raise ValueError(f"{path}: config fingerprint mismatch")
    return fp


def _write_f32(fh, arr: np.ndarray):
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_f32(fh, count: int) -> np.ndarray:
    buf = fh.read(4 * count)
    if len(buf) != 4 * count:
        raise ValueError("truncated float payload")
    return np.frombuffer(buf, dtype="<f4").astype(np.float64)


def _write_f64(fh, arr: np.ndarray):
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_f64(fh, count: int) -> np.ndarray:
    buf = fh.read(8 * count)
    if len(buf) != 8 * count:
        raise ValueError("truncated float payload")
    return np.frombuffer(buf, dtype="<f8").copy()


# ---------------------------------------------------------------------------
# datasets


def save_dataset(path, data: np.ndarray, fingerprint: bytes):
    data = np.atleast_2d(np.asarray(data))
    n, d = data.shape
    with open(path, "wb") as fh:
        _write_header(fh, MAGIC_DATASET, fingerprint)
        fh.write(struct.pack("<II", n, d))
        _write_f32(fh, data)


def load_dataset(path, fingerprint: bytes | None = None) -> np.ndarray:
    with open(path, "rb") as fh:
        _read_header(fh, MAGIC_DATASET, fingerprint, path)
        n, d = struct.unpack("<II", fh.read(8))
        return _read_f32(fh, n * d).reshape(n, d)


# ---------------------------------------------------------------------------
# observations (ys plus per-item descriptor payloads)


def save_observations(path, observations, channel: CorruptionChannel,
                      fingerprint: bytes):
    n = len(observations)
    kind_tag = _CHANNEL_KINDS.index(channel.kind)
    with open(path, "wb") as fh:
        _write_header(fh, MAGIC_OBSERVATIONS, fingerprint)
        fh.write(struct.pack("<BIIId", kind_tag, n, channel.dim_x,
                             channel.dim_y, channel.sigma_y))
        if channel.kind == "mask":
            fh.write(struct.pack("<d", channel.rho))
        elif channel.kind == "sphere":
            fh.write(struct.pack("<I", channel.rows))
        elif channel.kind == "blur":
            ks, h, w = channel.blur_params
            fh.write(struct.pack("<IId", h, w, ks))
        else:
            _write_f64(fh, channel.matrix)
        ys = np.stack([o.y for o in observations])
        _write_f32(fh, ys)
        if channel.kind == "mask":
            bits = np.stack([pack_mask(o.desc.mask_bits) for o in observations])
            fh.write(bits.astype("<u1").tobytes())
        elif channel.kind == "sphere":
            mats = np.stack([o.desc.matrix for o in observations])
            _write_f64(fh, mats)


def load_observations(path, fingerprint: bytes | None = None):
    """Returns (observations, channel)."""
    with open(path, "rb") as fh:
        _read_header(fh, MAGIC_OBSERVATIONS, fingerprint, path)
        kind_tag, n, dim_x, dim_y, sigma_y = struct.unpack("<BIIId", fh.read(21))
        kind = _CHANNEL_KINDS[kind_tag]
        if kind == "mask":
            (rho,) = struct.unpack("<d", fh.read(8))
            channel = CorruptionChannel(kind="mask", dim_x=dim_x, rho=rho,
                                        sigma_y=sigma_y)
        elif kind == "sphere":
            (rows,) = struct.unpack("<I", fh.read(4))
            channel = CorruptionChannel(kind="sphere", dim_x=dim_x, rows=rows,
                                        sigma_y=sigma_y)
        elif kind == "blur":
            h, w, ks = struct.unpack("<IId", fh.read(16))
            channel = CorruptionChannel(kind="blur", dim_x=h * w, height=h,
                                        width=w, sigma_kernel=ks,
                                        sigma_y=sigma_y)
        else:
            mat = _read_f64(fh, dim_y * dim_x).reshape(dim_y, dim_x)
            channel = CorruptionChannel(kind="fixed", dim_x=dim_x,
                                        matrix=mat, sigma_y=sigma_y)
        ys = _read_f32(fh, n * dim_y).reshape(n, dim_y)
        observations = []
        if kind == "mask":
            nbytes = (dim_x + 7) // 8
            raw = np.frombuffer(fh.read(n * nbytes), dtype=np.uint8)
            raw = raw.reshape(n, nbytes)
            for i in range(n):
                bits = unpack_mask(raw[i], dim_x)
                observations.append(
                    Observation(ys[i], MatrixDescriptor("mask", mask_bits=bits))
                )
        elif kind == "sphere":
            mats = _read_f64(fh, n * dim_y * dim_x).reshape(n, dim_y, dim_x)
            for i in range(n):
                observations.append(
                    Observation(ys[i], MatrixDescriptor("dense", matrix=mats[i]))
                )
        else:
            desc = channel.sample_matrix(None)
            for i in range(n):
                observations.append(Observation(ys[i], desc))
    return observations, channel


# ---------------------------------------------------------------------------
# checkpoints


def _write_named_arrays(fh, arrays: dict, writer):
    fh.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        nb = name.encode()
        fh.write(struct.pack("<H", len(nb)))
        fh.write(nb)
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        writer(fh, arr)


def _read_named_arrays(fh, reader) -> dict:
    (count,) = struct.unpack("<I", fh.read(4))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", fh.read(2))
        name = fh.read(nlen).decode()
        (ndim,) = struct.unpack("<B", fh.read(1))
        shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        out[name] = reader(fh, size).reshape(shape)
    return out


def save_checkpoint(path, model: DenoiserModel, iteration: int,
                    fingerprint: bytes, training_state: bool = True,
                    dataset_mean: np.ndarray | None = None):
    """Parameters at f32; optional f64 exact-resume payload (full-precision
    parameters plus Adam moments, step counter, and the reconstruction-mean
    vector used to initialize the next E-step)."""
    arch = model.arch
    sched = model.schedule
    with open(path, "wb") as fh:
        _write_header(fh, MAGIC_CHECKPOINT, fingerprint)
        flags = (1 if model.ema is not None else 0) \
            | (2 if training_state else 0) \
            | (4 if model.conditional else 0) \
            | (8 if sched.squared_endpoints else 0) \
            | (16 if dataset_mean is not None else 0)
        fh.write(struct.pack("<iB", iteration, flags))
        fh.write(struct.pack("<dd", sched.sigma0, sched.sigma1))
        fh.write(struct.pack("<IIII", arch.dim_x, arch.dim_y,
                             arch.desc_width, arch.embed_width))
        fh.write(struct.pack("<B", len(arch.hidden)))
        fh.write(struct.pack(f"<{len(arch.hidden)}I", *arch.hidden))
        _write_named_arrays(fh, model.params.params, _write_f32)
        if model.ema is not None:
            _write_named_arrays(fh, model.ema.params, _write_f32)
        if training_state:
            fh.write(struct.pack("<q", model.params.step))
            _write_named_arrays(fh, model.params.params, _write_f64)
            _write_named_arrays(fh, model.params.m, _write_f64)
            _write_named_arrays(fh, model.params.v, _write_f64)
            if model.ema is not None:
                _write_named_arrays(fh, model.ema.params, _write_f64)
        if dataset_mean is not None:
            mean = np.asarray(dataset_mean, dtype=np.float64)
            fh.write(struct.pack("<I", mean.size))
            _write_f64(fh, mean)


def load_checkpoint(path, fingerprint: bytes | None = None,
                    allow_mismatch: bool = False):
    """Returns (model, iteration, dataset_mean).  Fingerprint mismatch
    raises unless allow_mismatch is set."""
    with open(path, "rb") as fh:
        if allow_mismatch:
            _read_header(fh, MAGIC_CHECKPOINT, None, path)
        else:
            _read_header(fh, MAGIC_CHECKPOINT, fingerprint, path)
        iteration, flags = struct.unpack("<iB", fh.read(5))
        sigma0, sigma1 = struct.unpack("<dd", fh.read(16))
        dim_x, dim_y, desc_width, embed_width = struct.unpack("<IIII", fh.read(16))
        (nh,) = struct.unpack("<B", fh.read(1))
        hidden = struct.unpack(f"<{nh}I", fh.read(4 * nh))
        arch = DenoiserArch(dim_x=dim_x, dim_y=dim_y, desc_width=desc_width,
                            hidden=tuple(hidden), embed_width=embed_width)
        schedule = NoiseSchedule(sigma0=sigma0, sigma1=sigma1,
                                 squared_endpoints=bool(flags & 8))
        params32 = _read_named_arrays(fh, _read_f32)
        ema = None
        if flags & 1:
            ema32 = _read_named_arrays(fh, _read_f32)
            ema = ParamStore(params=ema32)
        store = ParamStore(params=params32)
        if flags & 2:
            (step,) = struct.unpack("<q", fh.read(8))
            p64 = _read_named_arrays(fh, _read_f64)
            m64 = _read_named_arrays(fh, _read_f64)
            v64 = _read_named_arrays(fh, _read_f64)
            store = ParamStore(params=p64, m=m64, v=v64, step=step)
            if flags & 1:
                ema = ParamStore(params=_read_named_arrays(fh, _read_f64))
        dataset_mean = None
        if flags & 16:
            (d,) = struct.unpack("<I", fh.read(4))
            dataset_mean = _read_f64(fh, d)
        model = DenoiserModel(arch=arch, schedule=schedule, params=store,
                              conditional=bool(flags & 4), ema=ema)
    return model, iteration, dataset_mean


# ---------------------------------------------------------------------------
# metrics log (append-only JSON lines)


def metrics_header(fingerprint: bytes) -> dict:
    return {"magic": METRICS_MAGIC, "version": FORMAT_VERSION,
            "fingerprint": fingerprint.hex()}


def append_metric(path, record: dict):
    """One json object per line, written with a single append so concurrent
    readers never see a partial record."""
    line = json.dumps(record, sort_keys=True) + "\n"
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(line)
        fh.flush()
        os.fsync(fh.fileno())


def init_metrics(path, fingerprint: bytes):
    if not os.path.exists(path) or os.path.getsize(path) == 0:
        append_metric(path, metrics_header(fingerprint))


def read_metrics(path, fingerprint: bytes | None = None):
    with open(path, "r", encoding="utf-8") as fh:
        lines = [json.loads(l) for l in fh if l.strip()]
    if not lines or lines[0].get("magic") != METRICS_MAGIC:
        raise ValueError(f"{path}: missing metrics header")
    if lines[0]["version"] != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported metrics version")
    if fingerprint is not None and lines[0]["fingerprint"] != fingerprint.hex():
        raise ValueError(f"{path}: config fingerprint mismatch")
    return lines[1:]


# ---------------------------------------------------------------------------
# run-directory lock


class RunLock:
    """Exclusive ownership of an output directory via an O_EXCL lock file."""

    def __init__(self, directory):
        self.path = os.path.join(directory, ".lock")
        self._fd = None

    def __enter__(self):
        try:
            self._fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(
                f"output directory is locked by another run: {self.path}"
            ) from None
        os.write(self._fd, str(os.getpid()).encode())
        return self

    def __exit__(self, *exc):
        if self._fd is not None:
            os.close(self._fd)
            os.unlink(self.path)
            self._fd = None
        return False
