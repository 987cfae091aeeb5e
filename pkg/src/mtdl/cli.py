"""Command-line entry point: ``mtdl {synth,train,encode,eval,gradcheck,baseline}``.

Exit status is 0 on success, 1 for invalid input and 2 for numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import io
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import data as dio
from .errors import NumericalError, ValidationError
from .losses import decide_batch
from .model import ClassifierBank, Head, Hyperparams, MultimodalDictionary, Prior
from .oracle import gradcheck_suite
from .training import encode_dataset, init_model, supervised_fit

log = logging.getLogger("mtdl")

MODEL_FORMAT = "mtdl-model-1"
CODE_LAYOUT = "row i holds sample i; column j*S+s holds entry (j, s) of its d x S code matrix"


# --------------------------------------------------------------------------
# experiment configuration

@dataclass
class ExperimentConfig:
    data_path: Optional[str] = None
    synth: Optional[dio.SynthSpec] = None
    synth_seed: int = 0
    hp: Hyperparams = field(default_factory=Hyperparams)
    unsupervised: Optional[Hyperparams] = None
    head: Head = Head.SOFTMAX
    prior: Prior = Prior.L12
    atoms_per_class: int = 3
    output: str = "model"


def _coerce(kind, raw: str, key: str):
    try:
        if kind is bool:
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if kind is tuple:
            return tuple(int(v) for v in raw.split(","))
        if kind == "optional_float":
            return None if raw.strip().lower() in ("", "none") else float(raw)
        return kind(raw)
    except ValueError:
        raise ValidationError(f"cannot parse {key} = {raw!r}") from None


def _field_kinds(cls) -> dict:
    kinds = {}
    for f in dataclasses.fields(cls):
        t = str(f.type)
        if "Optional" in t:
            kinds[f.name] = "optional_float"
        elif "bool" in t:
            kinds[f.name] = bool
        elif "tuple" in t:
            kinds[f.name] = tuple
        elif "int" in t:
            kinds[f.name] = int
        else:
            kinds[f.name] = float
    return kinds


def _section(cp, name, kinds) -> dict:
    if not cp.has_section(name):
        return {}
    out = {}
    for key, raw in cp.items(name):
        if key not in kinds:
            raise ValidationError(f"unknown key [{name}] {key}")
        out[key] = _coerce(kinds[key], raw, f"[{name}] {key}")
    return out


CONFIG_SECTIONS = {"data", "synth", "model", "hyperparams", "unsupervised", "output"}


def parse_config(text: str) -> ExperimentConfig:
    """Read an INI-style experiment description; unknown sections or keys are errors."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ValidationError(f"config: {exc}") from None
    extra = set(cp.sections()) - CONFIG_SECTIONS
    if extra:
        raise ValidationError(f"unknown config section(s): {sorted(extra)}")
    cfg = ExperimentConfig()
    d = _section(cp, "data", {"path": str, "seed": int})
    cfg.data_path = d.get("path")
    cfg.synth_seed = d.get("seed", 0)
    if cp.has_section("synth"):
        cfg.synth = dio.SynthSpec(**_section(cp, "synth", _field_kinds(dio.SynthSpec)))
    m = _section(cp, "model", {"head": str, "prior": str, "atoms_per_class": int})
    try:
        cfg.head = Head(m.get("head", cfg.head.value))
        cfg.prior = Prior(m.get("prior", cfg.prior.value))
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    cfg.atoms_per_class = m.get("atoms_per_class", cfg.atoms_per_class)
    kinds = _field_kinds(Hyperparams)
    cfg.hp = Hyperparams(**_section(cp, "hyperparams", kinds))
    if cp.has_section("unsupervised"):
        cfg.unsupervised = dataclasses.replace(cfg.hp, **_section(cp, "unsupervised", kinds))
    cfg.output = _section(cp, "output", {"dir": str}).get("dir", cfg.output)
    if (cfg.data_path is None) == (cfg.synth is None):
        raise ValidationError("give exactly one of [data] path or a [synth] section")
    cfg.hp.check_prior(cfg.prior)
    return cfg


def load_experiment_data(cfg: ExperimentConfig) -> dio.Dataset:
    if cfg.synth is not None:
        return dio.generate_synthetic(cfg.synth, cfg.synth_seed)
    return dio.load_dataset(cfg.data_path)


# --------------------------------------------------------------------------
# model files

def save_model(path, dictionary: MultimodalDictionary, bank: ClassifierBank, hp: Hyperparams,
               prior: Prior, lambda2: float, step: int = 0, epoch: int = 0) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    dio.write_manifest(path / "manifest.txt", {
        "format": MODEL_FORMAT,
        "head": bank.head.value,
        "prior": Prior(prior).value,
        "S": dictionary.n_modalities,
        "d": dictionary.n_atoms,
        "dims": ",".join(str(n) for n in dictionary.dims),
        "outputs": bank.weights[0].shape[0],
        "lambda1": repr(hp.lambda1),
        "lambda1_l11": repr(hp.lambda1_l11),
        "lambda2": repr(float(lambda2)),
        "nu": repr(bank.nu),
        "active_tol": repr(hp.active_tol),
        "admm_tol": repr(hp.admm_tol),
        "admm_max_iter": hp.admm_max_iter,
        "epoch": epoch,
        "step": step,
        "files": "D_<s>.bin is n_s x d; W_<s>.bin is outputs x d",
    })
    for s, (D, W) in enumerate(zip(dictionary.dicts, bank.weights)):
        dio.write_matrix(path / f"D_{s}.bin", D)
        dio.write_matrix(path / f"W_{s}.bin", W)


@dataclass
class LoadedModel:
    dictionary: MultimodalDictionary
    bank: ClassifierBank
    hp: Hyperparams
    prior: Prior


def load_model(path) -> LoadedModel:
    path = Path(path)
    man = dio.read_manifest(path / "manifest.txt")
    if man.get("format") != MODEL_FORMAT:
        raise ValidationError(f"{path}: not a model directory")
    S = int(man["S"])
    if len(list(path.glob("D_*.bin"))) != S or len(list(path.glob("W_*.bin"))) != S:
        raise dio.DimensionMismatch(f"{path}: expected {S} dictionary and classifier files")
    D = MultimodalDictionary(tuple(dio.read_matrix(path / f"D_{s}.bin") for s in range(S)))
    head = Head(man["head"])
    bank = ClassifierBank(tuple(dio.read_matrix(path / f"W_{s}.bin") for s in range(S)), head,
                          float(man["nu"]))
    hp = Hyperparams(lambda1=float(man["lambda1"]), lambda1_l11=float(man["lambda1_l11"]),
                     lambda2=float(man["lambda2"]), nu=float(man["nu"]),
                     active_tol=float(man["active_tol"]), admm_tol=float(man["admm_tol"]),
                     admm_max_iter=int(man["admm_max_iter"]))
    return LoadedModel(D, bank, hp, Prior(man["prior"]))


def predict(model: LoadedModel, X) -> np.ndarray:
    """1-based class predictions for row-layout features ``X``."""
    codes, _ = encode_dataset(X, model.dictionary, model.hp, model.prior)
    return dio.from_head_labels(decide_batch(model.bank, codes), model.bank.head)


def training_log_csv(history) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "step", "objective", "mean_kkt", "mean_active"])
    for r in history:
        w.writerow([r.epoch, r.step, repr(r.objective), repr(r.mean_kkt), repr(r.mean_active)])
    return buf.getvalue()


def run_training(cfg: ExperimentConfig, out: Optional[str] = None) -> Path:
    ds = load_experiment_data(cfg)
    train = ds.subset("train")
    if train.n_samples == 0:
        raise ValidationError("no training samples in the dataset")
    y = dio.to_head_labels(train.labels, cfg.head)
    X = train.rows()
    n_atoms = cfg.atoms_per_class * train.n_classes
    state = init_model(X, y, cfg.hp, cfg.head, cfg.prior, n_atoms=n_atoms, unsupervised_hp=cfg.unsupervised)
    state = supervised_fit(state, X, y, cfg.hp, cfg.prior)
    path = Path(out or cfg.output)
    save_model(path, state.dictionary, state.bank, cfg.hp, cfg.prior, state.lambda2, state.step, state.epoch)
    (path / "train_log.csv").write_text(training_log_csv(state.history))
    return path


# --------------------------------------------------------------------------
# commands

def _select(ds: dio.Dataset, split: str) -> dio.Dataset:
    if split == "all":
        return ds
    sub = ds.subset(split)
    if sub.n_samples == 0:
        raise ValidationError(f"split {split!r} is empty")
    return sub


def cmd_synth(args) -> int:
    spec = dio.SynthSpec(n_classes=args.classes, n_modalities=args.modalities,
                         dims=tuple([args.dim] * args.modalities), atoms_per_class=args.atoms_per_class,
                         train_per_class=args.train_per_class, test_per_class=args.test_per_class,
                         noise=args.noise, active_per_sample=args.active_per_sample,
                         class_similarity=args.class_similarity, shared_atoms=args.shared_atoms,
                         correlated=args.correlated, one_hot=args.one_hot)
    ds = dio.generate_synthetic(spec, args.seed)
    dio.save_dataset(ds, args.out)
    print(f"wrote {ds.n_samples} samples ({ds.n_modalities} modalities, {ds.n_classes} classes) to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = parse_config(Path(args.config).read_text())
    path = run_training(cfg, args.out)
    print(f"model written to {path}")
    return 0


def cmd_encode(args) -> int:
    model = load_model(args.model)
    ds = _select(dio.load_dataset(args.data), args.split)
    codes, kkt = encode_dataset(ds.rows(), model.dictionary, model.hp, model.prior)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    N, d, S = codes.shape
    dio.write_matrix(out / "codes.bin", codes.reshape(N, d * S))
    dio.write_manifest(out / "manifest.txt", {"N": N, "d": d, "S": S, "layout": CODE_LAYOUT,
                                              "max_kkt": repr(float(kkt.max()))})
    print(f"encoded {N} samples, max optimality residual {kkt.max():.3g}")
    return 0


def _report(metrics: dio.Metrics, csv_path) -> None:
    print(f"accuracy={metrics.accuracy:.6f}")
    print(f"n_test={int(metrics.confusion.sum())}")
    if csv_path:
        Path(csv_path).write_text(metrics.to_csv())


def cmd_eval(args) -> int:
    model = load_model(args.model)
    ds = _select(dio.load_dataset(args.data), args.split)
    _report(dio.score(ds.labels, predict(model, ds.rows()), ds.n_classes), args.csv)
    return 0


def cmd_baseline(args) -> int:
    ds = dio.load_dataset(args.data)
    train, test = ds.subset("train"), _select(ds, args.split)
    if args.atoms_per_class > 0:
        hp = Hyperparams(lambda1=args.lambda1, rho=args.rho, epochs=args.epochs, seed=args.seed)
        D, tags = dio.jsrc_udl_dictionary(train, args.atoms_per_class, hp)
    else:
        D, tags = dio.jsrc_dictionary(train)
    pred = dio.residual_classify(test.rows(), D, tags, args.lambda1)
    _report(dio.score(test.labels, pred, ds.n_classes), args.csv)
    return 0


def cmd_gradcheck(args) -> int:
    report = gradcheck_suite(n_instances=args.instances, seed=args.seed, eps=args.eps, tol=args.tol)
    print(report.to_text())
    return 0 if report.passed else 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ValidationError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mtdl", description="Dictionaries and classifiers learned jointly across modalities.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    q = sub.add_parser("synth", help="generate a synthetic dataset")
    q.add_argument("--out", required=True)
    q.add_argument("--classes", type=int, default=10)
    q.add_argument("--modalities", type=int, default=3)
    q.add_argument("--dim", type=int, default=20)
    q.add_argument("--atoms-per-class", type=int, default=3)
    q.add_argument("--train-per-class", type=int, default=40)
    q.add_argument("--test-per-class", type=int, default=20)
    q.add_argument("--noise", type=float, default=0.6)
    q.add_argument("--active-per-sample", type=int, default=2)
    q.add_argument("--class-similarity", type=float, default=0.7)
    q.add_argument("--shared-atoms", type=int, default=0)
    q.add_argument("--correlated", action="store_true")
    q.add_argument("--one-hot", action="store_true")
    q.add_argument("--seed", type=int, default=0)
    q.set_defaults(func=cmd_synth)

    q = sub.add_parser("train", help="train a model from a config file")
    q.add_argument("--config", required=True)
    q.add_argument("--out", help="override [output] dir")
    q.set_defaults(func=cmd_train)

    for name, func, helptext in (("encode", cmd_encode, "write sparse codes"),
                                 ("eval", cmd_eval, "classification metrics")):
        q = sub.add_parser(name, help=helptext)
        q.add_argument("--model", required=True)
        q.add_argument("--data", required=True)
        q.add_argument("--split", default="test" if name == "eval" else "all",
                       choices=["train", "val", "test", "all"])
        if name == "encode":
            q.add_argument("--out", required=True)
        else:
            q.add_argument("--csv")
        q.set_defaults(func=func)

    q = sub.add_parser("baseline", help="reconstruction-residual classifier")
    q.add_argument("--data", required=True)
    q.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    q.add_argument("--lambda1", type=float, default=0.05)
    q.add_argument("--atoms-per-class", type=int, default=0,
                   help="0 uses the training samples as atoms; otherwise learn this many per class")
    q.add_argument("--epochs", type=int, default=10)
    q.add_argument("--rho", type=float, default=1.0)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--csv")
    q.set_defaults(func=cmd_baseline)

    q = sub.add_parser("gradcheck", help="finite-difference check of the training gradients")
    q.add_argument("--instances", type=int, default=100)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--eps", type=float, default=1e-5)
    q.add_argument("--tol", type=float, default=1e-4)
    q.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
