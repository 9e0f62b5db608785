"""Command-line entry point: ``hnpipe <subcommand> [flags]``.

Every subcommand writes only under ``--out`` and finishes with a
``manifest.json`` listing input and output hashes, the seed and the hash of
the effective configuration.  Exit codes: 0 success, 1 runtime error,
2 configuration error.
"""
import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from . import explain, features, metrics, model_select, phantom, postprocess, preprocess, seg_core, trees
from .tabular_io import read_feature_csv, read_patient_csv, write_feature_csv
from .volume_io import load_nifti, save_nifti

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("hnpipe")

APPROACH_MODELS = {1: "rf1", 2: "rf2", 3: "gbt"}


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    workers: int = 0  # 0: one per logical core
    archs: tuple = (1, 2, 3)
    approaches: tuple = (1, 2, 3)
    features_arch: int = 3
    ground_truth_masks: bool = False
    test_fraction: float = 0.25
    cv_folds: int = 10


@dataclass(frozen=True)
class PreprocessConfig:
    spacing: tuple = (2.0, 2.0, 2.0)
    train_fraction: float = 0.9


SECTIONS = {
    "run": RunConfig,
    "phantom": phantom.PhantomConfig,
    "preprocess": PreprocessConfig,
    "train": seg_core.TrainConfig,
    "kidney": features.KidneyParams,
    "rf1": trees.RFConfig,
    "rf2": trees.RFConfig,
    "gbt": trees.GBTConfig,
}
# per-section defaults that differ from the dataclass defaults
SECTION_DEFAULTS = {
    "rf1": {"n_trees": 100, "max_features": "third"},
    "rf2": {"n_trees": 200, "max_features": "all"},
}
# seeds all derive from [run].seed
SEED_FIELDS = {"phantom": "master_seed", "train": "seed", "rf1": "seed", "rf2": "seed", "gbt": "seed"}


def _build(name, cls, values):
    allowed = {f.name for f in fields(cls)} - {SEED_FIELDS.get(name)}
    unknown = set(values) - allowed
    if unknown:
        raise ConfigError(f"[{name}]: unknown keys {sorted(unknown)}")
    vals = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    try:
        return cls(**vals)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{name}]: {e}") from None


def load_config(path=None, seed=None, workers=None):
    raw = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            raw = tomllib.loads(p.read_text(encoding="utf-8"))
        except (tomllib.TOMLDecodeError, UnicodeDecodeError) as e:
            raise ConfigError(f"cannot parse {p}: {e}") from None
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    run_vals = dict(raw.get("run", {}))
    if seed is not None:
        run_vals["seed"] = seed
    if workers is not None:
        run_vals["workers"] = workers
    cfg = {"run": _build("run", RunConfig, run_vals)}
    s = cfg["run"].seed
    for name, cls in SECTIONS.items():
        if name == "run":
            continue
        vals = {**SECTION_DEFAULTS.get(name, {}), **raw.get(name, {})}
        c = _build(name, cls, vals)
        if name in SEED_FIELDS:
            c = _replace(c, **{SEED_FIELDS[name]: s})
        cfg[name] = c
    return cfg


def _replace(obj, **kw):
    return type(obj)(**{**{f.name: getattr(obj, f.name) for f in fields(obj)}, **kw})


def config_dict(cfg):
    return {k: asdict(v) for k, v in cfg.items()}


def _canonical(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def config_hash(cfg):
    return hashlib.sha256(_canonical(config_dict(cfg))).hexdigest()


def _workers(cfg):
    return cfg["run"].workers or os.cpu_count() or 1


def _pmap(cfg, fn, items):
    items = list(items)
    n = min(_workers(cfg), max(1, len(items)))
    if n == 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(n) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------------------
# output bookkeeping


def _sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Outputs:
    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def write(self, rel, data):
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_bytes(data.encode("utf-8") if isinstance(data, str) else data)
        return p

    def path(self, rel):
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def manifest(self, command, cfg, inputs=()):
        outs = {}
        for p in sorted(self.root.rglob("*")):
            if p.is_file() and p.name != "manifest.json":
                outs[p.relative_to(self.root).as_posix()] = _sha(p)
        ins = {}
        for p in inputs:
            p = Path(p)
            files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
            for q in files:
                key = q.relative_to(p).as_posix() if p.is_dir() else q.name
                ins[f"{p.name}/{key}" if p.is_dir() else key] = _sha(q)
        doc = {
            "command": command,
            "version": __version__,
            "config": config_dict(cfg),
            "config_sha256": config_hash(cfg),
            "seed": cfg["run"].seed,
            "inputs": ins,
            "outputs": outs,
        }
        self.write("manifest.json", json.dumps(doc, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# dataset directory layout: clinical.csv, ct/, pet/, labels/ with <id>.nii


class Dataset:
    def __init__(self, root):
        self.root = Path(root)
        csv_path = self.root / "clinical.csv"
        if not csv_path.is_file():
            raise FileNotFoundError(f"missing {csv_path}")
        self.records = read_patient_csv(csv_path.read_bytes())
        self.ids = [r.patient_id for r in self.records]

    def ct(self, pid):
        return load_nifti(self.root / "ct" / f"{pid}.nii")

    def pet(self, pid):
        return load_nifti(self.root / "pet" / f"{pid}.nii")

    def label(self, pid):
        return load_nifti(self.root / "labels" / f"{pid}.nii")


def cohort_split(ids, cfg):
    """Deterministic (train, val, test) patient split shared by every stage."""
    s = cfg["run"].seed
    dev, test = preprocess.split_patients(ids, preprocess.SplitConfig(1.0 - cfg["run"].test_fraction, s))
    train, val = preprocess.split_patients(dev, preprocess.SplitConfig(cfg["preprocess"].train_fraction, s))
    return train, val, test


def write_phantom(cfg, out):
    cohort = phantom.generate_cohort(cfg["phantom"])
    out.write("clinical.csv", cohort.csv)

    def save(case):
        save_nifti(out.path(f"ct/{case.patient_id}.nii"), case.ct)
        save_nifti(out.path(f"pet/{case.patient_id}.nii"), case.pet)
        save_nifti(out.path(f"labels/{case.patient_id}.nii"), case.label)

    _pmap(cfg, save, cohort.cases)
    log.info("phantom: %d patients", len(cohort.cases))


def prepared_slices(ds, pid, arch, cfg, with_label=True):
    """Slices for one patient plus the geometry they were cut from."""
    ct = ds.ct(pid)
    label = ds.label(pid) if with_label else None
    if arch == 1:
        ctn = preprocess.normalize_255(ct)
        mask = label if label is not None else _empty_label(ctn)
        return preprocess.extract_slices(ctn, None, mask, 1, pid), ctn.geometry
    spec = preprocess.ResampleSpec(cfg["preprocess"].spacing)
    ctn = preprocess.normalize_255(preprocess.resample(ct, spec))
    petn = preprocess.normalize_255(preprocess.resample(ds.pet(pid), spec))
    mask = preprocess.resample(label, spec) if label is not None else _empty_label(ctn)
    return preprocess.extract_slices(ctn, petn, mask, arch, pid), ctn.geometry


def _empty_label(v):
    from .volume_io import LABEL, Volume

    return Volume(v.geometry, np.zeros(v.geometry.shape, dtype=np.uint8), LABEL)


def train_segmenter(ds, arch, cfg, out):
    train_ids, val_ids, _ = cohort_split(ds.ids, cfg)
    tr = []
    for pid in train_ids:
        tr += prepared_slices(ds, pid, arch, cfg)[0]
    tr = preprocess.rebalance(tr, cfg["run"].seed)
    va = []
    for pid in val_ids:
        va += preprocess.validation_filter(prepared_slices(ds, pid, arch, cfg)[0])
    log.info("arch %d: %d training slices, %d validation slices", arch, len(tr), len(va))

    def progress(epoch, loss, iou):
        if epoch % 10 == 0 or epoch == 1:
            log.info("arch %d epoch %d loss %.5f val_iou %.4f", arch, epoch, loss, iou)

    ckpt = seg_core.train(arch, tr, va, cfg["train"], progress)
    out.write(f"seg/arch{arch}/checkpoint.json", ckpt.to_json())
    out.write(f"seg/arch{arch}/metrics.csv", seg_core.metric_log_csv(ckpt.history))
    log.info("arch %d: best epoch %d, val IoU %.4f", arch, ckpt.epoch, ckpt.val_iou)
    return ckpt


def predict_masks(ds, ckpt, ids, cfg, out, subdir):
    arch = ckpt.params.arch

    def one(pid):
        sl, geom = prepared_slices(ds, pid, arch, cfg, with_label=False)
        probs = [seg_core.predict_slice(ckpt, s.channels)[0] for s in sl]
        pred = postprocess.reconstruct_prediction(probs, geom, ds.ct(pid).geometry)
        save_nifti(out.path(f"{subdir}/{pid}.nii"), pred)
        return pred

    return dict(zip(ids, _pmap(cfg, one, ids)))


def seg_table(rows):
    lines = ["arch,agg_dice_gtvp,agg_dice_gtvn,mean_aggregated_dice"]
    for arch, sc in rows:
        lines.append(f"{arch},{float(sc.aggregated_dice[1])!r},{float(sc.aggregated_dice[2])!r},{float(sc.mean_aggregated_dice)!r}")
    return "\n".join(lines) + "\n"


def evaluate_masks(ds, preds, ids):
    return metrics.aggregated_dice([(preds[p], ds.label(p)) for p in ids], ids)


def feature_matrix(ds, approach, cfg, masks=None):
    img = None
    if approach >= 2:
        if masks is None:
            raise ValueError(f"approach {approach} needs masks")
        img = {pid: features.image_features(masks[pid], ds.ct(pid)) for pid in ds.ids}
    return features.build_feature_matrix(ds.records, img, approach, cfg["kidney"])


def model_config(approach, cfg):
    return cfg[APPROACH_MODELS[approach]]


def surv_grid(approach, cfg):
    """The configured model for the approach plus the training-mean baseline."""
    return [model_config(approach, cfg), model_select.MeanBaseline()]


def _split_matrix(m, ids):
    pos = {pid: i for i, pid in enumerate(m.row_ids)}
    return m.subset([pos[p] for p in ids])


def _dev_test(m, cfg):
    train, val, test = cohort_split(m.row_ids, cfg)
    dev = [p for p in m.row_ids if p in set(train) | set(val)]
    return _split_matrix(m, dev), _split_matrix(m, test)


def run_cv(dev, approach, cfg):
    k = min(cfg["run"].cv_folds, dev.n_rows)
    return model_select.grid_search(surv_grid(approach, cfg), dev, k=k, seed=cfg["run"].seed)


def predictions_csv(ids, pred):
    return "PatientID,RFS_pred\n" + "".join(f"{p},{float(v)!r}\n" for p, v in zip(ids, pred))


def read_predictions(data):
    lines = data.decode("utf-8").strip().splitlines()[1:]
    ids = [ln.split(",")[0] for ln in lines]
    return ids, np.array([float(ln.split(",")[1]) for ln in lines])


def surv_scores(m, pred):
    events = None if m.events is None or np.isnan(m.events).any() else m.events
    rm = metrics.rmse(pred, m.target)
    try:
        ci = metrics.c_index(pred, m.target, events)
    except ValueError:
        ci = float("nan")
    return rm, ci


# ---------------------------------------------------------------------------
# subcommands


def cmd_phantom(a, cfg, out):
    write_phantom(cfg, out)
    return []


def cmd_resample(a, cfg, out):
    v = load_nifti(a.input)
    r = preprocess.resample(v, preprocess.ResampleSpec(cfg["preprocess"].spacing))
    save_nifti(out.path(Path(a.input).name), r)
    return [a.input]


def cmd_train_seg(a, cfg, out):
    ds = Dataset(a.data)
    for arch in _archs(a, cfg):
        train_segmenter(ds, arch, cfg, out)
    return [a.data]


def cmd_predict_seg(a, cfg, out):
    ds = Dataset(a.data)
    ckpt = seg_core.Checkpoint.from_json(Path(a.checkpoint).read_bytes())
    ids = a.patients.split(",") if a.patients else ds.ids
    predict_masks(ds, ckpt, ids, cfg, out, "masks")
    return [a.data, a.checkpoint]


def cmd_eval_seg(a, cfg, out):
    ds = Dataset(a.data)
    pred_dir = Path(a.pred)
    ids = [p for p in ds.ids if (pred_dir / f"{p}.nii").is_file()]
    if not ids:
        raise FileNotFoundError(f"no predicted masks in {pred_dir}")
    preds = {p: load_nifti(pred_dir / f"{p}.nii") for p in ids}
    sc = evaluate_masks(ds, preds, ids)
    out.write("seg_report.csv", seg_table([(a.arch or "", sc)]))
    out.write("seg_patients.csv", metrics.seg_report_csv(sc, str(a.arch or "")))
    return [a.data, a.pred]


def cmd_features(a, cfg, out):
    ds = Dataset(a.data)
    approach = a.approach or 1
    masks = None
    if approach >= 2:
        if a.masks:
            masks = {p: load_nifti(Path(a.masks) / f"{p}.nii") for p in ds.ids}
        else:
            masks = {p: ds.label(p) for p in ds.ids}
    m = feature_matrix(ds, approach, cfg, masks)
    out.write(f"features_approach{approach}.csv", write_feature_csv(m, id_name="PatientID"))
    return [a.data] + ([a.masks] if a.masks else [])


def _read_features(path):
    return read_feature_csv(Path(path).read_bytes(), id_name="PatientID")


def cmd_cv(a, cfg, out):
    m = _read_features(a.features)
    dev, _ = _dev_test(m, cfg)
    res = run_cv(dev, a.approach or 1, cfg)
    out.write("cv_table.csv", res.table_csv())
    out.write("cv_best.json", json.dumps({"best_index": res.best_index, "mean_rmse": res.results[res.best_index].mean_rmse}, sort_keys=True) + "\n")
    return [a.features]


def cmd_train_surv(a, cfg, out):
    m = _read_features(a.features)
    dev, _ = _dev_test(m, cfg)
    model = model_select.final_fit(model_config(a.approach or 1, cfg), dev)
    out.write("model.json", model.to_json())
    return [a.features]


def _load_model(path):
    return trees.TreeEnsemble.from_json(Path(path).read_bytes())


def cmd_predict_surv(a, cfg, out):
    m = _read_features(a.features)
    model = _load_model(a.model)
    out.write("predictions.csv", predictions_csv(m.row_ids, model.predict(m)))
    return [a.features, a.model]


def cmd_explain(a, cfg, out):
    m = _read_features(a.features)
    model = _load_model(a.model)
    out.write("shap_summary.csv", explain.shap_summary(model, m).to_csv())
    out.write("correlation.csv", explain.correlation_report(m)[1])
    return [a.features, a.model]


def cmd_eval_surv(a, cfg, out):
    m = _read_features(a.features)
    ids, pred = read_predictions(Path(a.predictions).read_bytes())
    rm, ci = surv_scores(_split_matrix(m, ids), pred)
    out.write("surv_report.csv", f"approach,test_rmse,test_c_index\n{a.approach or ''},{float(rm)!r},{float(ci)!r}\n")
    return [a.features, a.predictions]


def _archs(a, cfg):
    return [a.arch] if a.arch else list(cfg["run"].archs)


def cmd_run_all(a, cfg, out):
    write_phantom(cfg, Outputs(out.root / "data"))
    ds = Dataset(out.root / "data")
    _, _, test_ids = cohort_split(ds.ids, cfg)

    seg_rows, ckpts = [], {}
    for arch in _archs(a, cfg):
        ckpts[arch] = train_segmenter(ds, arch, cfg, out)
        preds = predict_masks(ds, ckpts[arch], test_ids, cfg, out, f"seg/arch{arch}/test_masks")
        sc = evaluate_masks(ds, preds, test_ids)
        seg_rows.append((arch, sc))
        out.write(f"seg/arch{arch}/patients.csv", metrics.seg_report_csv(sc, str(arch)))
        log.info("arch %d: mean aggregated Dice %.4f", arch, sc.mean_aggregated_dice)
    out.write("reports/seg_report.csv", seg_table(seg_rows))

    approaches = [a.approach] if a.approach else list(cfg["run"].approaches)
    masks = None
    if any(k >= 2 for k in approaches):
        if cfg["run"].ground_truth_masks:
            masks = {p: ds.label(p) for p in ds.ids}
        else:
            arch = cfg["run"].features_arch
            if arch not in ckpts:
                ckpts[arch] = train_segmenter(ds, arch, cfg, out)
            masks = predict_masks(ds, ckpts[arch], ds.ids, cfg, out, "masks")

    lines = ["approach,model,cv_mean_rmse,baseline_cv_mean_rmse,test_rmse,test_c_index"]
    for k in approaches:
        m = feature_matrix(ds, k, cfg, masks)
        out.write(f"surv/approach{k}/features.csv", write_feature_csv(m, id_name="PatientID"))
        dev, test = _dev_test(m, cfg)
        cv = run_cv(dev, k, cfg)
        out.write(f"surv/approach{k}/cv_table.csv", cv.table_csv())
        model = model_select.final_fit(model_config(k, cfg), dev)
        out.write(f"surv/approach{k}/model.json", model.to_json())
        pred = model.predict(test)
        out.write(f"surv/approach{k}/predictions.csv", predictions_csv(test.row_ids, pred))
        out.write(f"surv/approach{k}/shap_summary.csv", explain.shap_summary(model, test).to_csv())
        out.write(f"surv/approach{k}/correlation.csv", explain.correlation_report(dev)[1])
        rm, ci = surv_scores(test, pred)
        lines.append(f"{k},{APPROACH_MODELS[k]},{float(cv.results[0].mean_rmse)!r},{float(cv.results[1].mean_rmse)!r},{float(rm)!r},{float(ci)!r}")
        log.info("approach %d: cv RMSE %.2f, test RMSE %.2f, C-index %.4f", k, cv.results[0].mean_rmse, rm, ci)
    out.write("reports/surv_report.csv", "\n".join(lines) + "\n")
    return []


COMMANDS = {
    "phantom": (cmd_phantom, "generate a synthetic CT/PET/label cohort"),
    "resample": (cmd_resample, "resample one NIfTI volume to the configured spacing"),
    "train-seg": (cmd_train_seg, "train segmentation models"),
    "predict-seg": (cmd_predict_seg, "predict label volumes with a checkpoint"),
    "eval-seg": (cmd_eval_seg, "aggregated Dice report for predicted masks"),
    "features": (cmd_features, "build a survival feature matrix"),
    "cv": (cmd_cv, "cross-validate survival models"),
    "train-surv": (cmd_train_surv, "fit the survival model on the development rows"),
    "predict-surv": (cmd_predict_surv, "predict RFS with a fitted model"),
    "explain": (cmd_explain, "SHAP summary and correlation matrix"),
    "eval-surv": (cmd_eval_surv, "RMSE and C-index of RFS predictions"),
    "run-all": (cmd_run_all, "phantom, both tasks and their reports"),
}


def build_parser():
    p = argparse.ArgumentParser(prog="hnpipe", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (_, help_) in COMMANDS.items():
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help="TOML configuration file")
        s.add_argument("--out", required=True, help="output directory")
        s.add_argument("--seed", type=int, help="master seed (overrides [run].seed)")
        s.add_argument("--workers", type=int, help="worker threads for per-patient stages")
        s.add_argument("--arch", type=int, choices=(1, 2, 3))
        s.add_argument("--approach", type=int, choices=(1, 2, 3))
        s.add_argument("-v", "--verbose", action="store_true")
        if name in ("train-seg", "predict-seg", "eval-seg", "features"):
            s.add_argument("--data", required=True, help="cohort directory (clinical.csv, ct/, pet/, labels/)")
        if name == "resample":
            s.add_argument("--input", required=True)
        if name == "predict-seg":
            s.add_argument("--checkpoint", required=True)
            s.add_argument("--patients", help="comma-separated patient ids (default: all)")
        if name == "eval-seg":
            s.add_argument("--pred", required=True, help="directory of predicted <id>.nii masks")
        if name == "features":
            s.add_argument("--masks", help="directory of <id>.nii masks (default: ground truth)")
        if name in ("cv", "train-surv", "predict-surv", "explain", "eval-surv"):
            s.add_argument("--features", required=True)
        if name in ("predict-surv", "explain"):
            s.add_argument("--model", required=True)
        if name == "eval-surv":
            s.add_argument("--predictions", required=True)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = load_config(args.config, args.seed, args.workers)
    except ConfigError as e:
        print(f"hnpipe: config error: {e}", file=sys.stderr)
        return 2
    fn = COMMANDS[args.command][0]
    try:
        out = Outputs(args.out)
        inputs = fn(args, cfg, out)
        if args.config:
            inputs = [args.config] + list(inputs)
        out.manifest(args.command, cfg, inputs)
    except (OSError, ValueError, KeyError, RuntimeError) as e:
        print(f"hnpipe: error: {e}", file=sys.stderr)
        return 1
    return 0
