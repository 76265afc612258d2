"""Monte-Carlo BER experiments: configuration, calibration, trials, persistence.

Seeding scheme (reproducible under any worker scheduling): substreams are
derived as default_rng([seed, tag, ...indices]) with tags 0=channel, 1=info
bits, 2=CSI error, 3=block noise, 4=repetition-path noise. Channel, bits and
CSI error depend only on the trial index, so all SNR points of a trial share
them; noise additionally depends on the SNR index. All methods within a trial
see the same noise realization.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from .channel import Channel, corrupt_csi, sample_channel
from .coding import (CodeSpec, convolutional_code, decode, decode_soft, encode,
                     hamming_code, repetition_code)
from .modulation import bit_llrs, build_constellation, detect, modulate
from .precoders import (CcpParams, ccp_ec1, ccp_multibit, ccp_repetition,
                        linear_precoder, scale_to_power, slp_block)
from .probability import EffectiveNoise

__all__ = [
    "ExperimentConfig",
    "BerResult",
    "ConfigError",
    "SimError",
    "compute_snr",
    "calibrate_noise",
    "run_trial",
    "run_experiment",
    "export_scatter",
]

RESULT_SCHEMA_VERSION = 1
LINEAR_KINDS = ("mrt", "zf", "mmse")
KNOWN_METHODS = LINEAR_KINDS + ("slp", "ccp", "ccp-rep")


class ConfigError(ValueError):
    pass


class SimError(RuntimeError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    """Full description of one BER experiment (see README for the file schema)."""

    K: int = 4
    N: int = 4
    M: int = 4
    code: str = "hamming"            # none | repetition | hamming | convolutional
    code_n: int = 7
    code_k: int = 4
    conv_generators: tuple[int, ...] = (0o133, 0o171)
    conv_constraint_length: int = 7
    precoders: tuple[str, ...] = ("ccp", "slp")
    L_b: int = 56
    snr_db: tuple[float, ...] = (10.0,)
    trials: int = 100
    nmse: float = 0.0
    robust: bool = False
    decoding: str = "hard"           # hard | soft
    seed: int = 0
    out: str | None = None
    subblock_len: int = 0            # slots per sub-block; 0 = single block
    ccp_params: CcpParams = field(default_factory=CcpParams)

    def __post_init__(self):
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if not self.snr_db:
            raise ConfigError("snr_db grid must be nonempty")
        if self.decoding not in ("hard", "soft"):
            raise ConfigError("decoding must be 'hard' or 'soft'")
        if self.decoding == "soft" and self.code != "convolutional":
            raise ConfigError("soft decoding requires the convolutional code")
        for m in self.precoders:
            if m not in KNOWN_METHODS:
                raise ConfigError(f"unknown precoder {m!r}")
        if "ccp" in self.precoders and self.code == "none":
            raise ConfigError("ccp requires a channel code")
        if "ccp-rep" in self.precoders and self.code != "repetition":
            raise ConfigError("ccp-rep requires the repetition code")
        if self.L_b < 1:
            raise ConfigError("L_b must be >= 1")
        if self.subblock_len < 0 or self.nmse < 0:
            raise ConfigError("subblock_len and nmse must be nonnegative")

    def code_spec(self) -> CodeSpec | None:
        if self.code == "none":
            return None
        if self.code == "repetition":
            return repetition_code(self.code_n)
        if self.code == "hamming":
            return hamming_code(self.code_n, self.code_k)
        if self.code == "convolutional":
            return convolutional_code(self.conv_generators,
                                      self.conv_constraint_length)
        raise ConfigError(f"unknown code family {self.code!r}")

    def constellation(self):
        return build_constellation(self.M)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        d = dict(raw)
        if "precoders" in d and isinstance(d["precoders"], str):
            d["precoders"] = (d["precoders"],)
        for key in ("precoders", "snr_db"):
            if key in d:
                d[key] = tuple(d[key])
        if "conv_generators" in d:
            d["conv_generators"] = tuple(
                int(str(g), 8) for g in d["conv_generators"])
        base_params = d.pop("ccp_params", None)
        params = (CcpParams(**base_params) if isinstance(base_params, dict)
                  else base_params or CcpParams())
        ccp_keys = {f.name for f in CcpParams.__dataclass_fields__.values()} - {"n_sb"}
        ccp_kwargs = {k: d.pop(k) for k in list(d) if k in ccp_keys}
        d["ccp_params"] = replace(params, **ccp_kwargs)
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        raw = yaml.safe_load(Path(path).read_text())
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: expected a mapping of config keys")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ccp_params"] = asdict(self.ccp_params)
        d["precoders"] = list(self.precoders)
        d["snr_db"] = list(self.snr_db)
        d["conv_generators"] = [oct(g)[2:] for g in self.conv_generators]
        return d


# ---------------------------------------------------------------------------
# SNR bookkeeping
# ---------------------------------------------------------------------------

def compute_snr(H: np.ndarray, X: np.ndarray, sigma: float) -> float:
    """||H X||_F^2 / (K L_s sigma^2), in dB."""
    if sigma <= 0:
        raise SimError("sigma must be positive")
    K = H.shape[0]
    L_s = X.shape[1]
    return float(10.0 * np.log10(
        np.linalg.norm(H @ X) ** 2 / (K * L_s * sigma**2)))


def calibrate_noise(H: np.ndarray, X: np.ndarray, target_snr_db: float) -> float:
    """Noise level putting the given block exactly at the target SNR."""
    if not np.isfinite(target_snr_db):
        raise SimError("target SNR must be finite")
    energy = np.linalg.norm(H @ X) ** 2
    if energy == 0:
        raise SimError("cannot calibrate against a zero block")
    K = H.shape[0]
    L_s = X.shape[1]
    return float(np.sqrt(energy / (K * L_s * 10.0 ** (target_snr_db / 10.0))))


def _rng(seed, *tags) -> np.random.Generator:
    return np.random.default_rng([int(seed)] + [int(t) for t in tags])


def _pad_to_multiple(bits: np.ndarray, m: int) -> np.ndarray:
    extra = (-bits.shape[-1]) % m
    if extra == 0:
        return bits
    pad = np.zeros(bits.shape[:-1] + (extra,), dtype=bits.dtype)
    return np.concatenate([bits, pad], axis=-1)


def _encode_users(info: np.ndarray, spec: CodeSpec | None) -> np.ndarray:
    if spec is None:
        return info
    padded = _pad_to_multiple(info, spec.k)
    return np.stack([encode(row, spec) for row in padded])


# ---------------------------------------------------------------------------
# One Monte-Carlo trial
# ---------------------------------------------------------------------------

def _design_blocks(cfg: ExperimentConfig, H_tx: np.ndarray, eps2: float,
                   S: np.ndarray, coded: np.ndarray, info: np.ndarray,
                   sigma: float, slp):
    """Design every requested method's transmit block for one trial."""
    c = cfg.constellation()
    L_s = S.shape[1]
    power = float(L_s)  # unit average power per slot
    designs = {}
    for method in cfg.precoders:
        if method in LINEAR_KINDS:
            P_mat = linear_precoder(H_tx, method, sigma=sigma, rho=power / L_s)
            X, _ = scale_to_power(P_mat, S, power)
            designs[method] = {"X": X, "tau": None, "linear": True}
        elif method == "slp":
            designs[method] = {"X": slp.X, "tau": slp.tau, "linear": False}
        elif method == "ccp":
            spec = cfg.code_spec()
            noise = EffectiveNoise(sigma=sigma,
                                   eps2=eps2 if cfg.robust else 0.0)
            if cfg.subblock_len > 0:
                n_sb = max(1, L_s // cfg.subblock_len)
                params = replace(cfg.ccp_params, n_sb=n_sb)
                blk = ccp_multibit(H_tx, coded, power, c, params, noise, slp)
            else:
                blk = ccp_ec1(H_tx, coded, power, c, cfg.ccp_params, noise, slp)
            designs[method] = {"X": blk.X, "tau": blk.tau, "linear": False}
        elif method == "ccp-rep":
            n_rep = cfg.code_n
            power_rep = float(info.shape[1] * n_rep)
            blk = ccp_repetition(H_tx, info, power_rep, n_rep)
            designs[method] = {"X": blk.X, "tau": None, "linear": False,
                               "rep": True}
    return designs


def _receiver_gains(H_true: np.ndarray, X: np.ndarray, S: np.ndarray):
    """Per-user least-squares complex gain of the noiseless design and the
    residual (interference) power around it."""
    Z = H_true @ X
    num = (Z * S.conj()).sum(axis=1)
    den = (np.abs(S) ** 2).sum(axis=1)
    g = num / den
    resid = (np.abs(Z - g[:, None] * S) ** 2).mean(axis=1)
    return g, resid


def _decode_info(bits_hat: np.ndarray, llrs, cfg: ExperimentConfig,
                 spec: CodeSpec | None, L_c_raw: int) -> np.ndarray:
    """Coded-bit decisions (or LLRs) for one user back to information bits."""
    if spec is None:
        return bits_hat[: cfg.L_b]
    if cfg.decoding == "soft":
        info_hat = decode_soft(llrs[:L_c_raw], spec)
    else:
        info_hat = decode(bits_hat[:L_c_raw], spec)
    return info_hat[: cfg.L_b]


def run_trial(cfg: ExperimentConfig, ch: Channel, snr_db: float,
              rng_bits: np.random.Generator, rng_csi: np.random.Generator,
              rng_noise: np.random.Generator,
              rng_noise_rep: np.random.Generator | None = None):
    """Full pipeline for one channel realization at one SNR point.

    Returns {method: (per-user error counts, per-user bit counts,
    realized_snr_db)}. All standard-path methods share a noise realization.
    """
    c = cfg.constellation()
    spec = cfg.code_spec()
    info = rng_bits.integers(0, 2, (cfg.K, cfg.L_b)).astype(np.uint8)
    coded_raw = _encode_users(info, spec)
    L_c_raw = coded_raw.shape[1]
    coded = _pad_to_multiple(coded_raw, c.bits_per_symbol)
    S = np.stack([modulate(row, c) for row in coded])
    L_s = S.shape[1]

    if cfg.nmse > 0:
        est = corrupt_csi(ch, cfg.nmse, rng_csi)
        H_tx, eps2 = est.H_hat, est.eps2
    else:
        H_tx, eps2 = ch.H, 0.0

    slp = slp_block(H_tx, S, c, float(L_s))
    sigma = calibrate_noise(ch.H, slp.X, snr_db)
    designs = _design_blocks(cfg, H_tx, eps2, S, coded, info, sigma, slp)

    noise_std = sigma / np.sqrt(2.0)
    noise = noise_std * (rng_noise.standard_normal((cfg.K, L_s))
                         + 1j * rng_noise.standard_normal((cfg.K, L_s)))
    results = {}
    for method, d in designs.items():
        if d.get("rep"):
            results[method] = _run_rep_path(cfg, ch, d["X"], info, sigma,
                                            rng_noise_rep or rng_noise)
            continue
        X = d["X"]
        Y = ch.H @ X + noise
        gains, resid = _receiver_gains(ch.H, X, S)
        err = np.zeros(cfg.K, dtype=np.int64)
        for k in range(cfg.K):
            if d["linear"]:
                y_eq = Y[k] / gains[k]
                tau_k = c.nominal_tau
                bits_hat = detect(y_eq, c, tau_k)
                llr_input = y_eq
                llr_var = (sigma**2 + resid[k]) / np.abs(gains[k]) ** 2
            else:
                bits_hat = detect(Y[k], c, d["tau"])
                scale = np.abs(gains[k])
                llr_input = Y[k] / gains[k]
                llr_var = (sigma**2 + resid[k]) / scale**2
            llrs = None
            if cfg.decoding == "soft":
                llrs = bit_llrs(llr_input, c, llr_var).reshape(-1)
            info_hat = _decode_info(bits_hat, llrs, cfg, spec, L_c_raw)
            err[k] = int((info_hat != info[k]).sum())
        results[method] = (err, np.full(cfg.K, cfg.L_b, dtype=np.int64),
                           compute_snr(ch.H, X, sigma))
    return results


def _run_rep_path(cfg, ch, X, info, sigma, rng_noise):
    """Diagonal-decision receiver with majority vote per information bit."""
    n_rep = cfg.code_n
    K, L_slots = ch.H.shape[0], X.shape[1]
    noise = sigma / np.sqrt(2.0) * (rng_noise.standard_normal((K, L_slots))
                                    + 1j * rng_noise.standard_normal((K, L_slots)))
    Y = ch.H @ X + noise
    decisions = (Y.real + Y.imag < 0).astype(np.int64)  # slot bit estimates
    votes = decisions.reshape(K, -1, n_rep).sum(axis=2)
    info_hat = (2 * votes > n_rep).astype(np.uint8)
    err = (info_hat != info).sum(axis=1).astype(np.int64)
    return err, np.full(K, cfg.L_b, dtype=np.int64), compute_snr(ch.H, X, sigma)


# ---------------------------------------------------------------------------
# Experiment orchestration
# ---------------------------------------------------------------------------

@dataclass
class BerResult:
    """Aggregated information-bit error rates per method and SNR point."""

    snr_db: tuple[float, ...]
    methods: dict
    config: dict
    wall_clock_sec: float | None = None

    def ber(self, method: str) -> np.ndarray:
        m = self.methods[method]
        return np.array(m["errors"]) / np.array(m["bits"])

    def payload(self) -> dict:
        # wall clock deliberately excluded: identical config + seed must
        # produce byte-identical result files
        return {"schema_version": RESULT_SCHEMA_VERSION,
                "snr_db": list(self.snr_db),
                "methods": self.methods,
                "config": self.config}

    def __eq__(self, other):
        return isinstance(other, BerResult) and self.payload() == other.payload()

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "result.json"
        path.write_text(json.dumps(self.payload(), indent=2, sort_keys=True) + "\n")
        for method, m in self.methods.items():
            lines = ["snr_db,ber,bits,errors"]
            for snr, b, e in zip(self.snr_db, m["bits"], m["errors"]):
                ber = e / b if b else 0.0
                lines.append(f"{snr!r},{ber!r},{b},{e}")
            (out / f"{method}.csv").write_text("\n".join(lines) + "\n")
        return path

    @classmethod
    def read(cls, path) -> "BerResult":
        raw = json.loads(Path(path).read_text())
        if raw.get("schema_version") != RESULT_SCHEMA_VERSION:
            raise SimError(f"unsupported result schema in {path}")
        return cls(snr_db=tuple(raw["snr_db"]), methods=raw["methods"],
                   config=raw["config"])


def _trial_task(cfg: ExperimentConfig, snr_idx: int, trial: int):
    ch = sample_channel(cfg.K, cfg.N, rng=_rng(cfg.seed, 0, trial))
    out = run_trial(cfg, ch, cfg.snr_db[snr_idx],
                    rng_bits=_rng(cfg.seed, 1, trial),
                    rng_csi=_rng(cfg.seed, 2, trial),
                    rng_noise=_rng(cfg.seed, 3, snr_idx, trial),
                    rng_noise_rep=_rng(cfg.seed, 4, snr_idx, trial))
    return snr_idx, {m: (int(err.sum()), int(bits.sum()), rsnr)
                     for m, (err, bits, rsnr) in out.items()}


def run_experiment(cfg: ExperimentConfig, workers: int = 1,
                   progress=None) -> BerResult:
    """Loop the SNR grid and trials, aggregate exact bit counts, write outputs."""
    t0 = time.perf_counter()
    n_snr = len(cfg.snr_db)
    errors = {m: [0] * n_snr for m in cfg.precoders}
    bits = {m: [0] * n_snr for m in cfg.precoders}
    rsnr_sum = {m: [0.0] * n_snr for m in cfg.precoders}
    tasks = [(s, t) for s in range(n_snr) for t in range(cfg.trials)]

    def consume(snr_idx, per_method):
        for m, (e, b, rsnr) in per_method.items():
            errors[m][snr_idx] += e
            bits[m][snr_idx] += b
            rsnr_sum[m][snr_idx] += rsnr

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_trial_task, cfg, s, t) for s, t in tasks]
            for i, fut in enumerate(futures):
                consume(*fut.result())
                if progress:
                    progress(i + 1, len(tasks))
    else:
        for i, (s, t) in enumerate(tasks):
            consume(*_trial_task(cfg, s, t))
            if progress:
                progress(i + 1, len(tasks))

    methods = {}
    for m in cfg.precoders:
        methods[m] = {
            "errors": errors[m],
            "bits": bits[m],
            "ber": [e / b if b else 0.0 for e, b in zip(errors[m], bits[m])],
            "mean_realized_snr_db": [s / cfg.trials for s in rsnr_sum[m]],
        }
    result = BerResult(snr_db=cfg.snr_db, methods=methods, config=cfg.to_dict(),
                       wall_clock_sec=time.perf_counter() - t0)
    if cfg.out:
        result.write(cfg.out)
    return result


def export_scatter(cfg: ExperimentConfig, out_path, trial: int = 0,
                   snr_index: int = 0) -> Path:
    """Noiseless received points H x_t per user for one trial's designs (CSV)."""
    c = cfg.constellation()
    spec = cfg.code_spec()
    ch = sample_channel(cfg.K, cfg.N, rng=_rng(cfg.seed, 0, trial))
    info = _rng(cfg.seed, 1, trial).integers(0, 2, (cfg.K, cfg.L_b)).astype(np.uint8)
    coded = _pad_to_multiple(_encode_users(info, spec), c.bits_per_symbol)
    S = np.stack([modulate(row, c) for row in coded])
    if cfg.nmse > 0:
        est = corrupt_csi(ch, cfg.nmse, _rng(cfg.seed, 2, trial))
        H_tx, eps2 = est.H_hat, est.eps2
    else:
        H_tx, eps2 = ch.H, 0.0
    slp = slp_block(H_tx, S, c, float(S.shape[1]))
    sigma = calibrate_noise(ch.H, slp.X, cfg.snr_db[snr_index])
    designs = _design_blocks(cfg, H_tx, eps2, S, coded, info, sigma, slp)
    lines = ["method,user,slot,re,im"]
    for method, d in designs.items():
        Z = ch.H @ d["X"]
        for k in range(Z.shape[0]):
            for t in range(Z.shape[1]):
                lines.append(
                    f"{method},{k},{t},{float(Z[k, t].real)!r},{float(Z[k, t].imag)!r}")
    path = Path(out_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")
    return path
