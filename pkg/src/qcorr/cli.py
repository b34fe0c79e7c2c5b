"""Batch pipeline: simulate | train | evaluate | verify | report.

Configuration is a flat, sectioned key=value text file; any ``--section.key=
value`` argument overrides the file (last writer wins), and the QCORR_SEED
environment variable overrides the configured seed.  All artifacts are
emitted under the configured output directory; outputs carry no timestamps,
so a command re-run with the same config and seed is byte-identical.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric abort.
"""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass, fields

import numpy as np

from . import dsp, evaluation, infometrics, training, twinbeam
from .neural import load_checkpoint, save_checkpoint
from .trace import TraceFormatError, TraceSet, load_trace, save_trace


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


@dataclass
class PipelineConfig:
    # [sim]
    sim_squeezing_db: float = 7.8
    sim_mean_probe: float = 128.0
    sim_mean_conj: float = 115.0
    sim_correlation_bandwidth_hz: float = 3.5e6
    sim_length: int = 100_000
    sim_sample_rate_hz: float = 2.0e9
    # [scatterer]
    scatterer_transmission: float = 0.126
    scatterer_smoothing_tau_s: float = 2.5e-7
    scatterer_electronic_noise_rms: float = 6.0
    scatterer_delay_samples: int = 0
    # [train]
    train_window_len: int = 50
    train_hidden_len: int = 32
    train_batch_size: int = 500
    train_epochs: int = 100
    train_learning_rate: float = 0.001
    train_loss_kind: str = "mse"
    train_combiner_sign: float = 1.0
    train_engine: str = "fast"
    train_window_formula: str = "paper"
    train_allow_out_of_range: bool = False
    # [analysis]
    analysis_band_lo_hz: float = 1.5e6
    analysis_band_hi_hz: float = 3.5e6
    analysis_welch_segment: int = 4096
    analysis_welch_overlap: float = 0.5
    analysis_histogram_bins: int = 100
    analysis_max_shift_samples: int = 100
    # [verify]
    verify_epochs: int = 20
    # [paths]
    paths_out_dir: str = "artifacts"
    # [run]
    run_seed: int = 20250101

    def pair_params(self, seed: int) -> twinbeam.SqueezedPairParams:
        return twinbeam.SqueezedPairParams(
            squeezing_db=self.sim_squeezing_db, mean_probe=self.sim_mean_probe,
            mean_conj=self.sim_mean_conj,
            correlation_bandwidth_hz=self.sim_correlation_bandwidth_hz,
            length=self.sim_length, sample_rate_hz=self.sim_sample_rate_hz,
            seed=seed)

    def scatterer_params(self) -> twinbeam.ScattererParams:
        return twinbeam.ScattererParams(
            transmission=self.scatterer_transmission,
            smoothing_tau_s=self.scatterer_smoothing_tau_s,
            electronic_noise_rms=self.scatterer_electronic_noise_rms,
            delay_samples=self.scatterer_delay_samples)

    def hyperparams(self, **overrides) -> training.Hyperparams:
        kw = dict(
            window_len=self.train_window_len, hidden_len=self.train_hidden_len,
            batch_size=self.train_batch_size, epochs=self.train_epochs,
            learning_rate=self.train_learning_rate, loss_kind=self.train_loss_kind,
            seed=self.run_seed, combiner_sign=self.train_combiner_sign,
            engine=self.train_engine, window_formula=self.train_window_formula,
            allow_out_of_range=self.train_allow_out_of_range)
        kw.update(overrides)
        return training.Hyperparams(**kw)

    def band(self) -> dsp.BandSpec:
        return dsp.BandSpec(self.analysis_band_lo_hz, self.analysis_band_hi_hz)

    def welch(self) -> dsp.WelchParams:
        return dsp.WelchParams(self.analysis_welch_segment, self.analysis_welch_overlap)


_FIELD_TYPES = {f.name: f.type for f in fields(PipelineConfig)}


def _coerce(name: str, raw: str):
    kind = _FIELD_TYPES[name]
    try:
        if kind == "int":
            return int(float(raw))
        if kind == "float":
            return float(raw)
        if kind == "bool":
            return raw.strip().lower() in ("1", "true", "yes", "on")
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


def parse_config_file(path) -> dict:
    """Sectioned key=value file -> {'section_key': raw string}."""
    values = {}
    section = ""
    try:
        fh = open(path)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1].strip()
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            name = f"{section}_{key.strip()}" if section else key.strip()
            values[name] = value.strip()
    return values


def build_config(config_path=None, overrides=()) -> PipelineConfig:
    """defaults < config file < QCORR_SEED < --section.key=value overrides."""
    raw = {}
    if config_path is not None:
        raw.update(parse_config_file(config_path))
    env_seed = os.environ.get("QCORR_SEED")
    if env_seed is not None:
        raw["run_seed"] = env_seed
    for item in overrides:
        if not item.startswith("--") or "=" not in item:
            raise ConfigError(f"unrecognized argument {item!r} (expected --section.key=value)")
        key, value = item[2:].split("=", 1)
        raw[key.replace(".", "_")] = value
    cfg = PipelineConfig()
    for name, value in raw.items():
        if name not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {name.replace('_', '.', 1)!r}")
        setattr(cfg, name, _coerce(name, value))
    return cfg


def _out_dir(cfg: PipelineConfig, sub: str = "") -> str:
    base = cfg.paths_out_dir
    if not os.path.isdir(base):
        raise ConfigError(f"output directory does not exist: {base}")
    path = os.path.join(base, sub) if sub else base
    os.makedirs(path, exist_ok=True)
    return path


TRACE_FILES = ("probe_pre", "conj_pre", "conj_post", "probe_truth",
               "probe_disrupted", "sql_probe", "sql_conj")


def _trace_path(cfg, name):
    return os.path.join(_out_dir(cfg, "traces"), f"{name}.qtrc")


def _load_traces(cfg, names):
    out = {}
    for name in names:
        path = _trace_path(cfg, name)
        if not os.path.exists(path):
            raise DataError(f"missing trace file {path} (run 'qcorr simulate' first)")
        out[name] = load_trace(path, "binary")
    return out


def cmd_simulate(cfg: PipelineConfig) -> int:
    seed = cfg.run_seed
    pre = cfg.pair_params(seed)
    post = cfg.pair_params(seed + 1)
    probe_pre, conj_pre = twinbeam.generate_twin_beams(pre)
    probe_truth, conj_post = twinbeam.generate_twin_beams(post)
    sql_probe, sql_conj = twinbeam.generate_sql_reference(pre)
    probe_disrupted = twinbeam.apply_scatterer(probe_truth, cfg.scatterer_params(), seed)
    traces = {"probe_pre": probe_pre, "conj_pre": conj_pre, "conj_post": conj_post,
              "probe_truth": probe_truth, "probe_disrupted": probe_disrupted,
              "sql_probe": sql_probe, "sql_conj": sql_conj}
    for name, tr in traces.items():
        save_trace(tr.with_samples(tr.samples, label=name), _trace_path(cfg, name),
                   "binary")
    band, welch = cfg.band(), cfg.welch()
    for label, pair in (("pre-epoch", (probe_pre, conj_pre)),
                        ("post-epoch", (probe_truth, conj_post)),
                        ("disrupted", (probe_disrupted, conj_post))):
        spec = dsp.intensity_difference_spectrum(pair[0], pair[1],
                                                 (sql_probe, sql_conj), welch)
        level = dsp.band_average_squeezing(spec, band)
        print(f"in-band difference noise ({label}): {level:+.2f} dB rel. SQL "
              f"(ratio {10 ** (level / 10):.3f})")
    print(f"wrote {len(traces)} traces to {_out_dir(cfg, 'traces')}")
    return 0


def cmd_train(cfg: PipelineConfig) -> int:
    traces = _load_traces(cfg, ("probe_pre", "conj_pre", "conj_post", "probe_truth"))
    ts = TraceSet(traces["probe_pre"], traces["conj_pre"], traces["conj_post"],
                  traces["probe_truth"])
    try:
        hp = cfg.hyperparams()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    model, report, norm = training.run_training(ts, hp)
    ckpt_dir = _out_dir(cfg, "checkpoints")
    ckpt_path = os.path.join(ckpt_dir, "model.qckp")
    save_checkpoint(model, ckpt_path, meta={
        "norm_ranges": {k: list(v) for k, v in norm.ranges.items()},
        "loss_kind": hp.loss_kind, "seed": hp.seed})
    report.save_csv(os.path.join(_out_dir(cfg, "reports"), "loss_curves.csv"))
    print(f"final train loss {report.train_losses[-1]:.6g}, "
          f"val loss {report.val_losses[-1]:.6g}, test loss {report.test_loss:.6g}")
    print(f"checkpoint: {ckpt_path}")
    return 0


def cmd_evaluate(cfg: PipelineConfig) -> int:
    ckpt_path = os.path.join(_out_dir(cfg, "checkpoints"), "model.qckp")
    if not os.path.exists(ckpt_path):
        raise DataError(f"missing checkpoint {ckpt_path} (run 'qcorr train' first)")
    model, meta = load_checkpoint(ckpt_path)
    norm = training.NormParams({k: tuple(v) for k, v in meta["norm_ranges"].items()})
    traces = _load_traces(cfg, TRACE_FILES)
    ts = TraceSet(traces["probe_pre"], traces["conj_pre"], traces["conj_post"],
                  traces["probe_truth"])
    report = evaluation.evaluate_recovery(
        ts, model, norm, traces["probe_disrupted"],
        (traces["sql_probe"], traces["sql_conj"]), band=cfg.band(), welch=cfg.welch(),
        n_bins=cfg.analysis_histogram_bins,
        max_shift_samples=cfg.analysis_max_shift_samples,
        formula=cfg.train_window_formula, engine=cfg.train_engine)
    rep_dir = _out_dir(cfg, "reports")
    evaluation.save_report(report, os.path.join(rep_dir, "recovery.txt"))
    for name, curve in report.curves.items():
        path = os.path.join(rep_dir, f"{name}.csv")
        if isinstance(curve, infometrics.MICurve):
            infometrics.save_mi_curve_csv(curve, path)
        else:
            dsp.save_spectrum_csv(curve, path)
    _print_report(report.as_dict())
    return 0


def cmd_verify(cfg: PipelineConfig) -> int:
    traces = _load_traces(cfg, ("probe_pre", "conj_pre", "conj_post"))
    ts = TraceSet(traces["probe_pre"], traces["conj_pre"], traces["conj_post"])
    try:
        hp = cfg.hyperparams(epochs=cfg.verify_epochs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    result = evaluation.verify_single_stream(ts, hp, cfg.analysis_histogram_bins)
    out = _out_dir(cfg, "verify")
    save_trace(result.rec_probe, os.path.join(out, "rec_probe.csv"), "csv")
    save_trace(result.rec_conj, os.path.join(out, "rec_conj.csv"), "csv")
    np.savetxt(os.path.join(out, "joint_hist_original.csv"),
               result.hist_original.counts, fmt="%d", delimiter=",")
    np.savetxt(os.path.join(out, "joint_hist_reconstructed.csv"),
               result.hist_reconstructed.counts, fmt="%d", delimiter=",")
    print(f"pearson r (probe): {result.pearson_probe:.4f}")
    print(f"pearson r (conj):  {result.pearson_conj:.4f}")
    print(f"joint-histogram cosine similarity: {result.cosine_similarity:.4f}")
    print(f"artifacts in {out}")
    return 0


def cmd_report(cfg: PipelineConfig) -> int:
    path = os.path.join(_out_dir(cfg, "reports"), "recovery.txt")
    if not os.path.exists(path):
        raise DataError(f"missing report {path} (run 'qcorr evaluate' first)")
    _print_report(evaluation.load_report(path))
    return 0


def _print_report(values: dict) -> None:
    print("recovery report")
    for key, value in values.items():
        print(f"  {key} = {value}")
    hw = evaluation.HARDWARE_BASELINE
    print("hardware (integrating-sphere) baseline for comparison:")
    print(f"  mi_recovery_pct = {hw['mi_recovery_pct']}")
    print(f"  mi_peak_delay_ns = {hw['mi_peak_delay_ns']}")


_COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "evaluate": cmd_evaluate,
             "verify": cmd_verify, "report": cmd_report}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] in ("-h", "--help"):
        print("usage: qcorr {simulate|train|evaluate|verify|report} "
              "[config.txt] [--section.key=value ...]")
        return 0 if argv else 2
    verb, rest = argv[0], argv[1:]
    if verb not in _COMMANDS:
        print(f"unknown command {verb!r}; expected one of {sorted(_COMMANDS)}",
              file=sys.stderr)
        return 2
    config_path = None
    overrides = []
    for item in rest:
        if item.startswith("--"):
            overrides.append(item)
        elif config_path is None:
            config_path = item
        else:
            print(f"unexpected argument {item!r}", file=sys.stderr)
            return 2
    try:
        cfg = build_config(config_path, overrides)
        return _COMMANDS[verb](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, TraceFormatError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except training.TrainingDiverged as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
