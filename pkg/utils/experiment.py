"""
Command-line experiment driver.

    python -m utils.experiment gen          --out data.ddch
    python -m utils.experiment fit-compress --in data.ddch --out run
    python -m utils.experiment train        --codes run.ddcd --out fas_m10.ddmd --horizon 10
    python -m utils.experiment eval         --model fas_m10.ddmd --codes run.ddcd --basis run.ddpb --out report.csv
    python -m utils.experiment report       --in report.csv
"""

import argparse
import logging
import os
import sys
from dataclasses import replace
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from utils.baselines import ar_fit, ar_predict, persistence_predict
from utils.channel_sim import iter_frames
from utils.compression import (
    code_from_vector,
    compress,
    extract_reference,
    fit_pca,
    reconstruct_ref,
    reconstruction_report,
    select_reference_port,
)
from utils.config import ExperimentConfig, load_config
from utils.data_processing import (
    REPORT_COLUMNS,
    load_reports,
    pivot_capacity,
    pivot_outage,
    pivot_prediction_errors,
    summary_table,
)
from utils.errors import (
    ArgumentError,
    ConfigurationError,
    DDPredictError,
    FormatError,
    NumericalError,
    TrainingError,
    UndefinedReferenceError,
)
from utils.file_formats import (
    Checkpoint,
    ChannelWriter,
    read_basis,
    read_channels,
    read_codes,
    read_model,
    write_basis,
    write_codes,
    write_model,
)
from utils.link_metrics import (
    active_tap_capacity,
    db_to_linear,
    effective_slice,
    ergodic_capacity,
    nmse_db,
    outage_curve,
    rmse,
)
from utils.micro_model import MicroModel
from utils.training import prepare_dataset, predict_codes, split_point, train

logger = logging.getLogger(__name__)

PREDICTORS = ("fas_llm_mini", "transformer_no_lora", "persistence", "ridge_ar", "perfect_csi", "actual")
FLOAT_FORMAT = "%.10g"


class ExperimentRunner:
    def __init__(self, config: ExperimentConfig):
        self.config = config

    # ------------------------------------------------------------ gen

    def generate(self, out_path: str, n_frames: Optional[int] = None) -> Dict[str, float]:
        """Sinh dữ liệu kênh và ghi ra file DDCH1"""
        cfg = self.config
        n_frames = n_frames or cfg.n_frames
        geom, grid, scat = cfg.geometry, cfg.grid, cfg.scatterers
        energies = []
        with ChannelWriter(out_path, geom.n_ports, grid.n_tx, grid.n_doppler, grid.n_delay) as writer:
            for frame in iter_frames(n_frames, geom, grid, scat.n_paths, scat.kappa, scat.seed,
                                     cfg.mode, scat.los_doppler_bin):
                writer.write(frame)
                energies.append(frame.energy())
                if (frame.frame_index + 1) % 100 == 0:
                    logger.info("Generated %d/%d frames", frame.frame_index + 1, n_frames)
        summary = {
            "n_frames": writer.n_frames,
            "mean_energy": float(np.mean(energies)),
            "min_energy": float(np.min(energies)),
            "max_energy": float(np.max(energies)),
            "file_bytes": os.path.getsize(out_path),
        }
        print(f"\n✅ Wrote {summary['n_frames']} frames to {out_path} ({summary['file_bytes']:,} bytes)")
        print(f"   📐 Shape per frame: N_p={geom.n_ports}, N_t={grid.n_tx}, "
              f"N_ν={grid.n_doppler}, M_τ={grid.n_delay} ({cfg.mode})")
        print(f"   ⚡ Frame energy: mean {summary['mean_energy']:.4f}, "
              f"min {summary['min_energy']:.4f}, max {summary['max_energy']:.4f}")
        return summary

    # ------------------------------------------------------------ fit-compress

    def fit_compress(self, in_path: str, prefix: str, threshold: Optional[float] = None,
                     decompress_check: bool = False) -> Dict[str, float]:
        """Chọn port tham chiếu, học cơ sở PCA trên phần huấn luyện rồi nén mọi frame"""
        cfg = self.config
        threshold = cfg.compression.threshold if threshold is None else threshold
        channels = read_channels(in_path)
        _, _, n_t, n_doppler, n_delay = channels.data.shape
        n_train = split_point(channels.n_frames, cfg.compression.train_fraction)
        if n_train < 1:
            raise ArgumentError(f"{channels.n_frames} frames leave no training split")

        ref_port = select_reference_port(channels.frame(q) for q in range(n_train))
        train_refs = [extract_reference(channels.frame(q), ref_port) for q in range(n_train)]
        basis = fit_pca(train_refs, threshold)
        basis.ref_port = ref_port
        basis.grid_shape = (n_doppler, n_delay)

        codes = [compress(extract_reference(frame, ref_port), basis) for frame in channels]
        write_basis(prefix + ".ddpb", basis)
        write_codes(prefix + ".ddcd", codes)

        summary = {"ref_port": ref_port, "r_s": basis.r_s, "r_d": basis.r_d,
                   "spatial_ratio": basis.spatial_ratio, "doppler_ratio": basis.doppler_ratio,
                   "reduction": basis.reduction}
        print(f"\n✅ Basis fitted on {n_train}/{channels.n_frames} frames, reference port {ref_port + 1}")
        print(f"   📊 r_s = {basis.r_s} (retained {basis.spatial_ratio:.4f})")
        print(f"   📊 r_d = {basis.r_d} (retained {basis.doppler_ratio:.4f})")
        print(f"   🗜️ Code size {basis.code_size} vs {n_t * n_doppler * n_delay} raw "
              f"({100 * basis.reduction:.2f}% reduction)")
        print(f"   📄 {prefix}.ddpb, {prefix}.ddcd")
        if decompress_check:
            check = reconstruction_report(train_refs, basis)
            summary.update(check)
            print(f"   🔁 Reconstruction NMSE {check['nmse_db']:.6f} dB "
                  f"(projector oracle {check['projector_nmse_db']:.6f} dB)")
        return summary

    # ------------------------------------------------------------ train

    def train(self, codes_path: str, out_path: str, loss_log: Optional[str] = None,
              val_log: Optional[str] = None, horizon: Optional[int] = None, lora: bool = True):
        """Huấn luyện model dự đoán code và ghi checkpoint"""
        cfg = self.config
        horizon = horizon or cfg.horizon
        vectors, _, _ = read_codes(codes_path)
        data = prepare_dataset(vectors, cfg.past_window, horizon, delta=cfg.compression.delta_encoding,
                               train_fraction=cfg.compression.train_fraction)
        model = MicroModel(cfg.model_config(2 * vectors.shape[1], horizon, lora=lora), seed=cfg.train.seed)
        train_cfg = cfg.train
        if not lora:
            train_cfg = replace(train_cfg, mode="full")
        result = train(model, data, train_cfg)
        write_model(out_path, model, data.normalizer, delta=data.delta)

        if loss_log:
            with open(loss_log, "w") as fh:
                fh.writelines(f"{rec.epoch},{rec.loss!r}\n" for rec in result.history)
        if val_log:
            with open(val_log, "w") as fh:
                fh.writelines(f"{rec.epoch},{rec.val_nmse_db!r}\n" for rec in result.history)

        last = result.history[-1]
        print(f"\n✅ Trained {'LoRA' if lora else 'no-LoRA'} model (M={horizon}, N={cfg.past_window}) "
              f"for {len(result.history)} epochs")
        print(f"   📉 Final loss {last.loss:.6g}, validation NMSE {last.val_nmse_db:.2f} dB")
        print(f"   📄 {out_path}")
        return result

    # ------------------------------------------------------------ eval

    def evaluate(self, codes_path: str, basis_path: str, model_paths: Sequence[str] = (),
                 baseline_paths: Sequence[str] = (), channels_path: Optional[str] = None,
                 perfect_csi: bool = False) -> pd.DataFrame:
        """Đánh giá model và các baseline trên cùng các cửa sổ sau phần huấn luyện"""
        cfg = self.config
        vectors, r_s, r_d = read_codes(codes_path)
        basis = read_basis(basis_path)
        if (r_s, r_d) != (basis.r_s, basis.r_d):
            raise ArgumentError(f"codes are {r_s}x{r_d} but the basis ranks are {basis.r_s}x{basis.r_d}")
        n_doppler, n_delay = basis.grid_shape
        channels = read_channels(channels_path) if channels_path else None
        if channels is not None:
            expected = (vectors.shape[0], basis.A_s.shape[0], n_doppler, n_delay)
            got = (channels.n_frames,) + channels.data.shape[2:]
            if got != expected:
                raise ArgumentError(f"channel file {got} does not match codes/basis {expected}")

        models = {ckpt.model.config.horizon: ckpt for ckpt in map(read_model, model_paths)}
        baselines = {ckpt.model.config.horizon: ckpt for ckpt in map(read_model, baseline_paths)}
        for ckpt in list(models.values()) + list(baselines.values()):
            self._check_checkpoint(ckpt, vectors.shape[1])
        horizons = sorted(set(models) | set(baselines)) or list(cfg.eval.horizons)

        n_train = split_point(vectors.shape[0], cfg.compression.train_fraction)
        ar_model = ar_fit(vectors[:n_train], cfg.eval.ar_order, cfg.eval.ar_ridge)
        actual_refs: Dict[int, np.ndarray] = {}

        def actual_ref(f: int) -> np.ndarray:
            if f not in actual_refs:
                if channels is not None:
                    actual_refs[f] = extract_reference(channels.frame(f), basis.ref_port).data
                else:
                    actual_refs[f] = reconstruct_ref(code_from_vector(vectors[f], r_s, r_d), basis).data
            return actual_refs[f]

        rows: List[dict] = []
        N = cfg.past_window
        for M in horizons:
            starts = list(range(n_train, vectors.shape[0] - N - M + 1))
            if not starts:
                raise ArgumentError(f"no held-out window of N={N}, M={M} after frame {n_train}")
            targets = [f for s in starts for f in range(s + N, s + N + M)]
            truth = vectors[targets]

            forecasts: Dict[str, Optional[np.ndarray]] = {}
            for name, table in (("fas_llm_mini", models), ("transformer_no_lora", baselines)):
                ckpt = table.get(M)
                if ckpt is None:
                    forecasts[name] = None
                elif perfect_csi:
                    forecasts[name] = truth
                else:
                    forecasts[name] = np.concatenate([
                        predict_codes(ckpt.model, vectors[:s + N], ckpt.normalizer, ckpt.delta) for s in starts
                    ])
            forecasts["persistence"] = np.concatenate([persistence_predict(vectors[s:s + N], M) for s in starts])
            forecasts["ridge_ar"] = np.concatenate([ar_predict(ar_model, vectors[s:s + N], M) for s in starts])
            forecasts["perfect_csi"] = truth

            actual_slices = [effective_slice(actual_ref(f), n_doppler, n_delay) for f in targets]
            for name in PREDICTORS[:-1]:
                pred = forecasts.get(name)
                if pred is None:
                    continue
                inject = name == "perfect_csi" or (perfect_csi and name in ("fas_llm_mini", "transformer_no_lora"))
                rows += self._predictor_rows(name, M, pred, truth, targets, basis, actual_ref,
                                             actual_slices, inject)
            rows += self._link_rows("actual", M, actual_slices, actual_slices, outage_metric="outage_actual")
            logger.info("Evaluated horizon M=%d on %d held-out windows", M, len(starts))

        report = pd.DataFrame(rows, columns=REPORT_COLUMNS[:-1])
        report["config_hash"] = cfg.hash
        return report

    def _check_checkpoint(self, ckpt: Checkpoint, code_len: int):
        mcfg = ckpt.model.config
        if mcfg.feature_dim != 2 * code_len:
            raise ArgumentError(f"checkpoint feature_dim {mcfg.feature_dim} does not match codes (2x{code_len})")
        if mcfg.past_window != self.config.past_window:
            raise ArgumentError(
                f"checkpoint past window {mcfg.past_window} differs from past_window={self.config.past_window}"
            )
        if ckpt.normalizer is None:
            raise ArgumentError("checkpoint carries no normalizer")

    def _predictor_rows(self, name, M, pred, truth, targets, basis, actual_ref, actual_slices, inject):
        r_s, r_d = basis.r_s, basis.r_d
        n_doppler, n_delay = basis.grid_shape
        rows = [
            _row(name, "code_nmse_db", M, value=nmse_db(list(pred), list(truth))),
            _row(name, "code_rmse", M, value=rmse(list(pred), list(truth))),
        ]
        if inject:
            slices = actual_slices
            rows.append(_row(name, "channel_nmse_db", M, value=nmse_db(
                [actual_ref(f) for f in targets], [actual_ref(f) for f in targets])))
        else:
            num = den = 0.0
            slices = []
            for vec, f in zip(pred, targets):
                ref = reconstruct_ref(code_from_vector(vec, r_s, r_d), basis).data
                true_ref = actual_ref(f)
                num += float(np.sum(np.abs(ref - true_ref) ** 2))
                den += float(np.sum(np.abs(true_ref) ** 2))
                slices.append(effective_slice(ref, n_doppler, n_delay))
            if den == 0.0:
                raise UndefinedReferenceError("held-out channel frames carry no energy")
            value = -300.0 if num == 0.0 else max(10.0 * np.log10(num / den), -300.0)
            rows.append(_row(name, "channel_nmse_db", M, value=value))
        rows += self._link_rows(name, M, slices, actual_slices, outage_metric="outage_predicted")
        return rows

    def _link_rows(self, name, M, slices, actual_slices, outage_metric):
        ev = self.config.eval
        capacity, gap, outage, active = [], [], [], []
        for snr in ev.snr_db:
            rho = db_to_linear(snr)
            c_pred = ergodic_capacity(slices, rho)
            capacity.append(_row(name, "ergodic_capacity", M, snr, value=c_pred))
            if name != "actual":
                gap.append(_row(name, "capacity_gap", M, snr, value=ergodic_capacity(actual_slices, rho) - c_pred))
            for rate, p_out in zip(ev.target_rates, outage_curve(slices, rho, ev.target_rates)):
                outage.append(_row(name, outage_metric, M, snr, rate, p_out))
            active.append(_row(name, "active_tap_capacity", M, snr, value=float(np.mean(
                [active_tap_capacity(s, rho, ev.active_tap_fraction) for s in slices]))))
        return capacity + gap + outage + active


def _row(predictor, metric, horizon, snr_db=None, target_rate=None, value=None) -> dict:
    return {"predictor": predictor, "metric": metric, "horizon": horizon,
            "snr_db": snr_db, "target_rate": target_rate, "value": float(value)}


def write_report(report: pd.DataFrame, path: str):
    """Xuất report ra CSV"""
    report.to_csv(path, index=False, float_format=FLOAT_FORMAT, na_rep="")


def print_report_tables(report: pd.DataFrame, snr_db: Optional[float] = None):
    """In các bảng tóm tắt của report ra terminal"""
    snr_db = _pick_snr(report, snr_db)
    print("\n📊 Code NMSE (dB) by horizon")
    print(pivot_prediction_errors(report, "code_nmse_db").to_string(float_format=lambda v: f"{v:.2f}"))
    print("\n📊 Channel NMSE (dB) by horizon")
    print(pivot_prediction_errors(report, "channel_nmse_db").to_string(float_format=lambda v: f"{v:.2f}"))
    print("\n📡 Ergodic capacity (bit/s/Hz) by SNR, shortest horizon")
    print(pivot_capacity(report).to_string(float_format=lambda v: f"{v:.3f}"))
    if snr_db is not None:
        print(f"\n📉 Outage probability at {snr_db:g} dB, shortest horizon")
        print(pivot_outage(report, snr_db).to_string(float_format=lambda v: f"{v:.3f}"))


def _pick_snr(report: pd.DataFrame, snr_db: Optional[float]) -> Optional[float]:
    available = sorted(report["snr_db"].dropna().unique())
    if not available:
        return None
    if snr_db is None:
        return float(available[len(available) // 2])
    return float(min(available, key=lambda v: abs(v - snr_db)))


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Delay–Doppler channel forecasting experiments")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML configuration file")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.FIELD=VALUE",
                        help="Override a configuration value (repeatable)")
    common.add_argument("--seed", type=int, help="Seed for scatterers and training")
    common.add_argument("--threads", type=int, help="Worker threads for mini-batch gradients")
    common.add_argument("--mode", choices=["correlated", "phase_ramp"], help="Port generation mode")
    common.add_argument("-v", "--verbose", action="store_true", help="Debug logging")

    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", parents=[common], help="Generate a DDCH1 channel dataset")
    gen.add_argument("--out", required=True)
    gen.add_argument("--n-frames", type=int)

    fit = sub.add_parser("fit-compress", parents=[common], help="Fit the PCA basis and compress all frames")
    fit.add_argument("--in", dest="in_path", required=True)
    fit.add_argument("--out", required=True, help="Output prefix for .ddpb and .ddcd")
    fit.add_argument("--threshold", type=float)
    fit.add_argument("--decompress-check", action="store_true")

    tr = sub.add_parser("train", parents=[common], help="Train a forecaster on a code file")
    tr.add_argument("--codes", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--loss-log")
    tr.add_argument("--val-log")
    tr.add_argument("--horizon", type=int)
    tr.add_argument("--lora", choices=["on", "off"], default="on")

    ev = sub.add_parser("eval", parents=[common], help="Evaluate forecasters and baselines")
    ev.add_argument("--model", action="append", default=[])
    ev.add_argument("--baseline-model", action="append", default=[])
    ev.add_argument("--codes", required=True)
    ev.add_argument("--basis", required=True)
    ev.add_argument("--channels")
    ev.add_argument("--perfect-csi", action="store_true")
    ev.add_argument("--out", required=True)

    rep = sub.add_parser("report", help="Summarize report CSV files")
    rep.add_argument("--in", dest="in_paths", nargs="+", required=True)
    rep.add_argument("--snr-db", type=float)
    rep.add_argument("--out")
    rep.add_argument("-v", "--verbose", action="store_true")
    return parser


def _resolve_config(args) -> ExperimentConfig:
    overrides = list(args.set)
    if args.seed is not None:
        overrides += [f"scatterers.seed={args.seed}", f"train.seed={args.seed}"]
    if args.threads is not None:
        overrides.append(f"train.threads={args.threads}")
    if args.mode is not None:
        overrides.append(f'mode="{args.mode}"')
    if getattr(args, "horizon", None) is not None:
        overrides.append(f"horizon={args.horizon}")
    if getattr(args, "n_frames", None) is not None:
        overrides.append(f"n_frames={args.n_frames}")
    return load_config(args.config, overrides)


def run(args) -> int:
    if args.command == "report":
        report = load_reports(args.in_paths)
        print_report_tables(report, args.snr_db)
        if args.out:
            summary_table(report, _pick_snr(report, args.snr_db)).to_csv(
                args.out, index=False, float_format=FLOAT_FORMAT)
            print(f"\n📄 Summary written to {args.out}")
        return 0

    runner = ExperimentRunner(_resolve_config(args))
    if args.command == "gen":
        runner.generate(args.out)
    elif args.command == "fit-compress":
        runner.fit_compress(args.in_path, args.out, args.threshold, args.decompress_check)
    elif args.command == "train":
        runner.train(args.codes, args.out, args.loss_log, args.val_log, lora=args.lora == "on")
    elif args.command == "eval":
        report = runner.evaluate(args.codes, args.basis, args.model, args.baseline_model,
                                 args.channels, args.perfect_csi)
        write_report(report, args.out)
        print(f"\n✅ {len(report)} report rows written to {args.out} (config {runner.config.hash})")
        print_report_tables(report)
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s - %(levelname)s - %(message)s", datefmt="%H:%M:%S")
    try:
        return run(args)
    except ConfigurationError as exc:
        print(f"❌ Configuration error in {exc.field}: {exc}", file=sys.stderr)
        return 1
    except FormatError as exc:
        reason = "bad magic" if "bad magic" in str(exc) else "malformed file"
        print(f"❌ {reason}: {exc}", file=sys.stderr)
        return 3
    except (ArgumentError, NumericalError, TrainingError, UndefinedReferenceError, DDPredictError) as exc:
        print(f"❌ {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"❌ I/O error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
