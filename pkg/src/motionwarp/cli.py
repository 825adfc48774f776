"""Pipeline driver: one subcommand per stage, each writing its artifacts plus ``manifest.json``.

Options come from three layers, later ones winning: built-in defaults, a
JSON ``--config`` file, explicit command-line flags. The effective values
are stored in the manifest so ``motionwarp rerun <manifest>`` can repeat a
stage exactly.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, audiofeat, blendshape, dcaw, propagate, regressor, synthcorpus
from . import io as mio
from . import warp as W
from .errors import ContractError, MissingInputError, MotionWarpError

log = logging.getLogger("motionwarp")

MANIFEST = "manifest.json"
INDEX = "index.json"


@dataclass(frozen=True)
class Opt:
    name: str
    type: object
    default: object = None
    help: str = ""
    required: bool = False
    choices: tuple | None = None

    @property
    def dest(self) -> str:
        return self.name.replace("-", "_")


def _flag(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {v!r}")


def _ints(v) -> list[int]:
    if isinstance(v, list):
        return [int(x) for x in v]
    return [int(x) for x in str(v).split(",") if x.strip()]


STAGES: dict[str, list[Opt]] = {
    "synthgen": [
        Opt("kind", str, "warp", "what to generate", choices=("warp", "mesh", "audio")),
        Opt("count", int, 20, "warp pairs or mesh sequences"),
        Opt("noise", float, 0.1),
        Opt("min-frames", int, 20),
        Opt("max-frames", int, 60),
        Opt("warp-knots", int, 3, "0 gives the identity warp"),
        Opt("shared-mixing", _flag, False, "both warp views use the same observation map"),
        Opt("n-words", int, 5),
        Opt("n-speakers", int, 10),
        Opt("n-vertices", int, 100),
        Opt("n-modes", int, 3),
        Opt("speaker-spread", float, 0.07),
        Opt("audio-noise", float, 0.01),
    ],
    "featurize": [Opt("input", str, required=True, help="audio directory written by synthgen --kind audio")],
    "blendshapes-build": [
        Opt("input", str, required=True, help="mesh directory"),
        Opt("keep", float, 0.999),
        Opt("max-components", int, blendshape.DEFAULT_MAX_COMPONENTS),
    ],
    "blendshapes-eval": [
        Opt("input", str, required=True, help="mesh directory"),
        Opt("model", str, required=True, help="blendshape model directory"),
    ],
    "align": [
        Opt("input", str, required=True, help="warp-pair or feature directory"),
        Opt("mode", str, "dtw", choices=("dtw", "dcaw")),
        Opt("model", str, None, "DCAW model directory (mode dcaw)"),
        Opt("metric", str, "sqeuclidean", choices=("sqeuclidean", "abs")),
        Opt("reference-speaker", int, 0, "labelled speaker every other utterance is aligned to"),
    ],
    "train-dcaw": [
        Opt("input", str, required=True, help="warp-pair or feature directory"),
        Opt("encoder", str, "linear", choices=dcaw.ENCODER_KINDS),
        Opt("d-out", int, 64),
        Opt("d-a", int, 64),
        Opt("hidden", int, 128),
        Opt("band", float, W.DEFAULT_BAND, "negative disables the band"),
        Opt("lr", float, 5e-4),
        Opt("batch-size", int, 50),
        Opt("epochs", int, 200),
        Opt("patience", int, 20),
        Opt("per-word", _flag, False, "one model per word id"),
        Opt("reference-speaker", int, 0),
    ],
    "propagate": [
        Opt("input", str, required=True, help="feature directory holding the labelled utterances"),
        Opt("alignments", str, required=True),
    ],
    "assemble": [
        Opt("input", str, required=True, help="propagated-label directory"),
        Opt("features", str, required=True),
        Opt("split", str, "speaker", choices=propagate.SPLIT_MODES),
        Opt("val-speakers", _ints, None, "comma list; default is the last fifth of speaker ids"),
        Opt("val-words", _ints, None, "comma list; default is the last quarter of word ids"),
    ],
    "train-regressor": [
        Opt("input", str, required=True, help="corpus directory"),
        Opt("lr", float, 5e-4),
        Opt("beta1", float, 0.9),
        Opt("beta2", float, 0.99),
        Opt("batch-size", int, 50),
        Opt("epochs", int, 30),
        Opt("augment", _flag, True),
        Opt("width", int, 64),
        Opt("hidden", int, 128),
    ],
    "predict": [
        Opt("input", str, required=True, help="corpus, feature or audio directory"),
        Opt("model", str, required=True, help="regressor directory"),
        Opt("chunk", int, 15),
        Opt("smooth", int, 3),
    ],
    "eval-alignment": [
        Opt("input", str, required=True, help="warp-pair directory with ground truth"),
        Opt("alignments", str, required=True),
    ],
    "eval-ccc": [
        Opt("input", str, required=True, help="corpus or feature directory with targets"),
        Opt("predictions", str, required=True),
        Opt("split", str, "all", choices=("all", "train", "validation")),
    ],
}

PATH_KEYS = ("input", "model", "alignments", "features", "predictions")


# ---------------------------------------------------------------- helpers


def threads() -> int:
    raw = os.environ.get("MOTIONWARP_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ContractError(f"MOTIONWARP_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ContractError(f"MOTIONWARP_THREADS must be a positive integer, got {raw!r}")
    return n


def pmap(fn, items) -> list:
    """Order-preserving map over independent items, capped by MOTIONWARP_THREADS."""
    n = threads()
    if n == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(n) as pool:
        return list(pool.map(fn, items))


def read_index(directory, kinds: tuple[str, ...]) -> dict:
    path = Path(directory) / INDEX
    if not path.exists():
        raise MissingInputError(f"no {INDEX} in {directory}")
    doc = json.loads(path.read_text())
    if doc.get("kind") not in kinds:
        raise ContractError(f"{directory} holds {doc.get('kind')!r} data, expected one of {kinds}")
    return doc


def write_index(out: Path, kind: str, items: list, **extra) -> None:
    (out / INDEX).write_text(mio.canonical_json({"kind": kind, "items": items, **extra}))


def write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(mio.canonical_json(cfg).encode()).hexdigest()


def _files(root: Path) -> dict[str, str]:
    return {p.relative_to(root).as_posix(): mio.sha256_file(p)
            for p in sorted(root.rglob("*")) if p.is_file() and p.name != MANIFEST}


def _input_files(cfg: dict) -> dict[str, str]:
    out = {}
    for key in PATH_KEYS:
        if cfg.get(key):
            root = Path(cfg[key])
            for rel, digest in _files(root).items():
                out[f"{key}/{rel}"] = digest
    return out


def centre_mel(blocks: np.ndarray) -> np.ndarray:
    """(128, T) log-mel column at the centre of every frame block."""
    return np.ascontiguousarray(blocks[:, audiofeat.CONTEXT // 2, :, 0].T)


# ---------------------------------------------------------------- data access


def _load_features(directory) -> tuple[dict, dict[str, dict]]:
    doc = read_index(directory, ("features",))
    return doc, {it["id"]: it for it in doc["items"]}


def _feature_arrays(directory, item) -> dict[str, np.ndarray]:
    return mio.read_container(Path(directory) / item["file"])[0]


def _word_pairs(doc: dict, reference: int) -> list[tuple[dict, dict]]:
    """(reference-speaker item, other item) for every word the reference speaker uttered."""
    ref = {it["word"]: it for it in doc["items"] if it["speaker"] == reference}
    if not ref:
        raise ContractError(f"reference speaker {reference} has no utterances")
    return [(ref[it["word"]], it) for it in doc["items"] if it["speaker"] != reference and it["word"] in ref]


def _views(doc, directory, reference: int, conv: bool):
    """Aligned-view inputs plus identifying metadata for each pair in a dataset."""
    if doc["kind"] == "warp-pairs":
        out = []
        for it in doc["items"]:
            a = mio.read_container(Path(directory) / it["file"])[0]
            out.append((it["id"], a["X1"], a["X2"], {"source": it["id"], "target": it["id"], "word": None}))
        return out
    out = []
    for src, tgt in _word_pairs(doc, reference):
        f1 = _feature_arrays(directory, src)["features"]
        f2 = _feature_arrays(directory, tgt)["features"]
        v1, v2 = (f1, f2) if conv else (centre_mel(f1), centre_mel(f2))
        out.append((f"{src['id']}__{tgt['id']}", v1, v2, {"source": src["id"], "target": tgt["id"], "word": src["word"]}))
    return out


# ---------------------------------------------------------------- stages


def stage_synthgen(cfg: dict, out: Path) -> dict:
    spec = synthcorpus.SynthSpec(
        seed=cfg["seed"], n_speakers=cfg["n_speakers"], n_words=cfg["n_words"],
        frames=(cfg["min_frames"], cfg["max_frames"]), warp_knots=cfg["warp_knots"], noise=cfg["noise"],
        n_vertices=cfg["n_vertices"], n_modes=cfg["n_modes"], speaker_spread=cfg["speaker_spread"],
        audio_noise=cfg["audio_noise"], shared_mixing=cfg["shared_mixing"])
    if spec.frames[0] < 1 or spec.frames[0] > spec.frames[1]:
        raise ContractError(f"invalid frame range {spec.frames}")
    items = []
    if cfg["kind"] == "warp":
        for k in range(cfg["count"]):
            p = synthcorpus.gen_warp_pair(spec, k)
            sid = f"pair{k:04d}"
            mio.write_container(out / "pairs" / sid, {"X1": p.X1, "X2": p.X2, "warp": p.warp})
            mio.write_path(out / "truth" / f"{sid}.json", p.path, p.X1.shape[1], p.X2.shape[1])
            items.append({"id": sid, "file": f"pairs/{sid}.json", "truth": f"truth/{sid}.json",
                          "T1": p.X1.shape[1], "T2": p.X2.shape[1]})
        write_index(out, "warp-pairs", items, spec=spec.to_dict())
    elif cfg["kind"] == "mesh":
        for k in range(cfg["count"]):
            m = synthcorpus.gen_meshes(spec, item=k)
            sid = f"seq{k:04d}"
            mio.write_container(out / "meshes" / sid, {"meshes": m.meshes, "modes": m.modes, "coeffs": m.coeffs})
            items.append({"id": sid, "file": f"meshes/{sid}.json", "frames": len(m.meshes)})
        mio.write_obj(out / "neutral.obj", m.neutral, m.faces)
        write_index(out, "meshes", items, spec=spec.to_dict(), neutral="neutral.obj")
    else:
        corpus = synthcorpus.gen_audio_corpus(spec)
        for s in corpus.samples:
            sid = f"w{s.word:03d}_s{s.speaker:03d}"
            mio.write_wav(out / "wav" / f"{sid}.wav", s.wave.samples, s.wave.rate)
            mio.write_container(out / "labels" / sid, {"params": s.params})
            items.append({"id": sid, "speaker": s.speaker, "word": s.word, "wav": f"wav/{sid}.wav",
                          "labels": f"labels/{sid}.json", "frames": len(s.params)})
        mio.write_container(out / "truth", {"mixing": corpus.mixing, "weights": corpus.weights,
                                            "formants": corpus.formants})
        write_index(out, "audio", items, spec=spec.to_dict())
    return {"items": len(items)}


def stage_featurize(cfg: dict, out: Path) -> dict:
    src = Path(cfg["input"])
    doc = read_index(src, ("audio",))

    def one(it):
        wave = mio.read_wav(src / it["wav"])
        params = mio.read_container(src / it["labels"])[0]["params"] if it.get("labels") else None
        stack = audiofeat.featurize(wave, len(params) if params is not None else None)
        arrays = {"features": stack.frames}
        if params is not None:
            arrays["params"] = params
        mio.write_container(out / "features" / it["id"], arrays)
        return {"id": it["id"], "speaker": it["speaker"], "word": it["word"],
                "file": f"features/{it['id']}.json", "frames": len(stack.frames)}

    items = pmap(one, doc["items"])
    write_index(out, "features", items)
    return {"items": len(items), "frames": int(sum(it["frames"] for it in items))}


def _mesh_data(directory):
    src = Path(directory)
    doc = read_index(src, ("meshes",))
    neutral, _ = mio.read_obj(src / doc["neutral"])
    seqs = [(it["id"], mio.read_container(src / it["file"])[0]) for it in doc["items"]]
    return neutral.reshape(-1), seqs


def stage_blendshapes_build(cfg: dict, out: Path) -> dict:
    neutral, seqs = _mesh_data(cfg["input"])
    meshes = np.concatenate([a["meshes"] for _, a in seqs])
    model = blendshape.build_model(meshes, neutral, cfg["keep"], cfg["max_components"])
    model.save(out / "model")
    write_csv(out / "variance.csv", ["component", "variance_fraction"], enumerate(model.weights))
    metrics = {"n_components": model.n_components, "kept_variance": model.kept_variance}
    modes = seqs[0][1]["modes"]
    if modes.shape[1]:
        metrics["subspace_angle_to_truth"] = blendshape.subspace_angle(model.basis, modes)
    return metrics


def stage_blendshapes_eval(cfg: dict, out: Path) -> dict:
    model = blendshape.SpeechBlendshapeModel.load(Path(cfg["model"]) / "model")
    _, seqs = _mesh_data(cfg["input"])
    rows = []
    for sid, a in seqs:
        rec = blendshape.decode(blendshape.encode(a["meshes"], model), model)
        rows += [(sid, t, blendshape.pervertex_error(rec[t], a["meshes"][t])) for t in range(len(rec))]
    write_csv(out / "errors.csv", ["sequence", "frame", "pervertex_error"], rows)
    return {"mean_pervertex_error": float(np.mean([r[2] for r in rows]))}


def _load_dcaw(directory, word):
    root = Path(directory)
    doc = json.loads((root / "models.json").read_text()) if (root / "models.json").exists() else None
    if doc is None:
        raise MissingInputError(f"no DCAW model in {directory}")
    if doc["per_word"]:
        if word is None or str(word) not in doc["files"]:
            raise ContractError(f"no per-word DCAW model for word {word}")
        return dcaw.DCAWModel.load(root / doc["files"][str(word)])
    return dcaw.DCAWModel.load(root / doc["files"]["all"])


def stage_align(cfg: dict, out: Path) -> dict:
    src = Path(cfg["input"])
    doc = read_index(src, ("warp-pairs", "features"))
    conv = False
    if cfg["mode"] == "dcaw":
        if not cfg.get("model"):
            raise MissingInputError("align --mode dcaw needs --model")
        models_doc = json.loads((Path(cfg["model"]) / "models.json").read_text())
        conv = models_doc["encoder"] == "conv"
    views = _views(doc, src, cfg["reference_speaker"], conv)

    def one(v):
        pid, X1, X2, meta = v
        if cfg["mode"] == "dtw":
            path, _ = W.dtw(X1, X2, cfg["metric"])
        else:
            path = dcaw.align(_load_dcaw(cfg["model"], meta["word"]), X1, X2)
        t1, t2 = X1.shape[0] if conv else X1.shape[1], X2.shape[0] if conv else X2.shape[1]
        mio.write_path(out / "paths" / f"{pid}.json", path, t1, t2, {"source": meta["source"], "target": meta["target"]})
        return {"id": pid, "source": meta["source"], "target": meta["target"], "file": f"paths/{pid}.json",
                "T1": t1, "T2": t2}

    items = pmap(one, views)
    write_index(out, "alignments", items, mode=cfg["mode"])
    return {"pairs": len(items)}


def stage_train_dcaw(cfg: dict, out: Path) -> dict:
    src = Path(cfg["input"])
    doc = read_index(src, ("warp-pairs", "features"))
    conv = cfg["encoder"] == "conv"
    views = _views(doc, src, cfg["reference_speaker"], conv)
    if not views:
        raise ContractError("no training pairs")
    d_in = 0 if conv else views[0][1].shape[0]
    band = None if cfg["band"] < 0 else cfg["band"]
    tcfg = dcaw.DCAWTrainConfig(lr=cfg["lr"], batch_size=cfg["batch_size"], max_epochs=cfg["epochs"],
                                seed=cfg["seed"], patience=cfg["patience"])

    def make(word, seed):
        return dcaw.DCAWModel.create(cfg["encoder"], d_in, d_out=cfg["d_out"], d_a=cfg["d_a"], seed=seed,
                                     band_width=band)

    files, rows, metrics = {}, [], {}
    if cfg["per_word"]:
        if doc["kind"] != "features":
            raise ContractError("--per-word needs a feature directory with word ids")
        by_word: dict = {}
        for _, X1, X2, meta in views:
            by_word.setdefault(meta["word"], []).append((X1, X2))
        for word in sorted(by_word):
            seed = int(np.random.SeedSequence([cfg["seed"], int(word)]).generate_state(1)[0])
            model, hist = dcaw.train_dcaw(by_word[word], dcaw.DCAWTrainConfig(**{**tcfg.to_dict(), "seed": seed}),
                                          make(word, seed))
            model.save(out / f"word{word:03d}")
            files[str(word)] = f"word{word:03d}.json"
            rows += [(word, e, v) for e, v in enumerate(hist.loss)]
        metrics["models"] = len(files)
    else:
        model, hist = dcaw.train_dcaw([(v[1], v[2]) for v in views], tcfg, make(None, cfg["seed"]))
        model.save(out / "model")
        files["all"] = "model.json"
        rows = [("all", e, v) for e, v in enumerate(hist.loss)]
        metrics.update(best_epoch=hist.best_epoch, steps=hist.steps,
                       best_loss=max(hist.loss) if hist.loss else None)
    (out / "models.json").write_text(mio.canonical_json(
        {"per_word": bool(cfg["per_word"]), "encoder": cfg["encoder"], "files": files}))
    write_csv(out / "loss.csv", ["model", "epoch", "objective"], rows)
    return metrics


def stage_propagate(cfg: dict, out: Path) -> dict:
    fdoc, by_id = _load_features(cfg["input"])
    adoc = read_index(cfg["alignments"], ("alignments",))
    items = []
    labelled = {}
    for a in adoc["items"]:
        src, tgt = by_id.get(a["source"]), by_id.get(a["target"])
        if src is None or tgt is None:
            raise MissingInputError(f"alignment {a['id']} refers to an unknown utterance")
        if src["id"] not in labelled:
            labelled[src["id"]] = _feature_arrays(cfg["input"], src)["params"]
        path, _, t2 = mio.read_path(Path(cfg["alignments"]) / a["file"])
        if t2 != tgt["frames"]:
            raise ContractError(f"alignment {a['id']} covers {t2} frames, target has {tgt['frames']}")
        s = propagate.propagate_params(propagate.AlignedPair(path, labelled[src["id"]], t2))
        mio.write_container(out / "labels" / tgt["id"], {"params": s.target_params},
                            {"source": src["id"], "alignment": a["id"]})
        items.append({"id": tgt["id"], "speaker": tgt["speaker"], "word": tgt["word"],
                      "file": f"labels/{tgt['id']}.json", "source": src["id"]})
    for sid in sorted(labelled):
        it = by_id[sid]
        mio.write_container(out / "labels" / sid, {"params": labelled[sid]}, {"source": sid})
        items.append({"id": sid, "speaker": it["speaker"], "word": it["word"], "file": f"labels/{sid}.json",
                      "source": sid})
    items.sort(key=lambda it: it["id"])
    write_index(out, "propagated", items)
    return {"propagated": len(adoc["items"]), "sources": len(labelled)}


def _tail_ids(ids, fraction: float) -> list[int]:
    ids = sorted(set(ids))
    n = max(1, int(round(fraction * len(ids))))
    return ids[-n:]


def stage_assemble(cfg: dict, out: Path) -> dict:
    pdoc = read_index(cfg["input"], ("propagated",))
    _, feats = _load_features(cfg["features"])
    samples, blocks = [], []
    for it in pdoc["items"]:
        params = mio.read_container(Path(cfg["input"]) / it["file"])[0]["params"]
        samples.append(propagate.PropagatedSample(params, {"id": it["id"], "speaker": it["speaker"],
                                                           "word": it["word"], "source": it["source"]}))
        if it["id"] not in feats:
            raise MissingInputError(f"no features for {it['id']}")
        blocks.append(_feature_arrays(cfg["features"], feats[it["id"]])["features"])
    speakers = cfg["val_speakers"] if cfg["val_speakers"] is not None else _tail_ids(
        [s.provenance["speaker"] for s in samples], 0.2)
    words = cfg["val_words"] if cfg["val_words"] is not None else _tail_ids(
        [s.provenance["word"] for s in samples], 0.25)
    corpus = propagate.assemble_dataset(samples, blocks, out, cfg["split"], speakers,
                                        words if cfg["split"] == "word+speaker" else ())
    return {"train": len(corpus.partition("train")), "validation": len(corpus.partition("validation")),
            "dropped": len(samples) - len(corpus.items), "val_speakers": list(speakers),
            "val_words": list(words) if cfg["split"] == "word+speaker" else []}


def _corpus_samples(directory, split: str = "all") -> list[tuple[str, regressor.Sample, str]]:
    corpus = propagate.read_corpus(directory)
    return [(it.id, regressor.Sample(it.features, it.params, it.speaker, it.word), it.split)
            for it in corpus.items if split in ("all", it.split)]


def stage_train_regressor(cfg: dict, out: Path) -> dict:
    data = _corpus_samples(cfg["input"])
    train = [s for _, s, tag in data if tag == "train"]
    val = [s for _, s, tag in data if tag == "validation"]
    if not train:
        raise ContractError("corpus has no training items")
    var = np.concatenate([s.params for s in train]).var(axis=0)
    if var.sum() <= 0:
        raise ContractError("training targets are constant")
    weights = var / var.sum()
    tcfg = regressor.TrainConfig(lr=cfg["lr"], beta1=cfg["beta1"], beta2=cfg["beta2"], batch_size=cfg["batch_size"],
                                 epochs=cfg["epochs"], seed=cfg["seed"], augment=cfg["augment"])
    net = regressor.RegressorNet(cfg["seed"], train[0].params.shape[1], cfg["width"], cfg["hidden"])
    net, hist = regressor.train(train, tcfg, weights, val or None, net)
    net.save(out / "model", {"weights": weights.tolist()})
    rows = [(e, hist.train_loss[e], hist.val_ccc[e] if val else "") for e in range(len(hist.train_loss))]
    write_csv(out / "history.csv", ["epoch", "train_loss", "val_ccc"], rows)
    return {"best_epoch": hist.best_epoch, "best_val_ccc": max(hist.val_ccc) if val else None,
            "final_train_loss": hist.train_loss[-1] if hist.train_loss else None}


def _prediction_inputs(directory):
    """(id, frame blocks) for a corpus, feature or audio directory."""
    root = Path(directory)
    doc = read_index(root, ("features", "audio", "corpus"))
    if doc["kind"] == "corpus":
        return [(i, s.blocks) for i, s, _ in _corpus_samples(root)]
    if doc["kind"] == "features":
        return [(it["id"], _feature_arrays(root, it)["features"]) for it in doc["items"]]
    return [(it["id"], audiofeat.featurize(mio.read_wav(root / it["wav"])).frames) for it in doc["items"]]


def stage_predict(cfg: dict, out: Path) -> dict:
    net = regressor.RegressorNet.load(Path(cfg["model"]) / "model")
    inputs = _prediction_inputs(cfg["input"])

    def one(x):
        sid, blocks = x
        pred = regressor.predict_blocks(blocks, net, cfg["chunk"], cfg["smooth"])
        mio.write_container(out / "params" / sid, {"params": pred})
        return {"id": sid, "file": f"params/{sid}.json", "frames": len(pred)}

    items = pmap(one, inputs)
    write_index(out, "predictions", items)
    return {"items": len(items)}


def stage_eval_alignment(cfg: dict, out: Path) -> dict:
    src = Path(cfg["input"])
    doc = read_index(src, ("warp-pairs",))
    truth = {it["id"]: it for it in doc["items"]}
    adoc = read_index(cfg["alignments"], ("alignments",))
    rows = []
    for a in adoc["items"]:
        if a["target"] not in truth:
            raise MissingInputError(f"no ground truth for {a['id']}")
        p_alg, t1, t2 = mio.read_path(Path(cfg["alignments"]) / a["file"])
        p_grd, g1, g2 = mio.read_path(src / truth[a["target"]]["truth"])
        if (t1, t2) != (g1, g2):
            raise ContractError(f"{a['id']}: path is {t1}x{t2}, ground truth is {g1}x{g2}")
        rows.append((a["id"], W.alignment_error(p_alg, p_grd), W.normalized_alignment_error(p_alg, p_grd, t1, t2)))
    if not rows:
        raise ContractError("no alignments to evaluate")
    write_csv(out / "errors.csv", ["pair", "error", "normalized_error"], rows)
    return {"mean_error": float(np.mean([r[1] for r in rows])),
            "mean_normalized_error": float(np.mean([r[2] for r in rows])), "pairs": len(rows)}


def _targets(directory, split: str) -> dict[str, np.ndarray]:
    doc = read_index(directory, ("corpus", "features"))
    if doc["kind"] == "corpus":
        return {i: s.params for i, s, _ in _corpus_samples(directory, split)}
    if split != "all":
        raise ContractError("a feature directory has no train/validation split")
    return {it["id"]: _feature_arrays(directory, it)["params"] for it in doc["items"]}


def stage_eval_ccc(cfg: dict, out: Path) -> dict:
    targets = _targets(cfg["input"], cfg["split"])
    pdoc = read_index(cfg["predictions"], ("predictions",))
    preds, tgts = [], []
    for it in pdoc["items"]:
        if it["id"] not in targets:
            continue
        p = mio.read_container(Path(cfg["predictions"]) / it["file"])[0]["params"]
        t = targets[it["id"]]
        if p.shape != t.shape:
            raise ContractError(f"{it['id']}: prediction {p.shape} vs target {t.shape}")
        preds.append(p)
        tgts.append(t)
    if not preds:
        raise ContractError("no predictions match the evaluation targets")
    per = regressor.ccc_per_param(np.concatenate(preds), np.concatenate(tgts))
    write_csv(out / "per_param.csv", ["param", "ccc"], enumerate(per))
    return {"mean_ccc": float(per.mean()), "items": len(preds)}


RUNNERS = {
    "synthgen": stage_synthgen, "featurize": stage_featurize, "blendshapes-build": stage_blendshapes_build,
    "blendshapes-eval": stage_blendshapes_eval, "align": stage_align, "train-dcaw": stage_train_dcaw,
    "propagate": stage_propagate, "assemble": stage_assemble, "train-regressor": stage_train_regressor,
    "predict": stage_predict, "eval-alignment": stage_eval_alignment, "eval-ccc": stage_eval_ccc,
}


# ---------------------------------------------------------------- driver


def effective_config(stage: str, ns: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags; unknown config keys are rejected."""
    opts = {o.dest: o for o in STAGES[stage]}
    cfg = {d: o.default for d, o in opts.items()}
    cfg["seed"] = 0
    if ns.config:
        path = Path(ns.config)
        if not path.exists():
            raise MissingInputError(f"config file {path} not found")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as err:
            raise ContractError(f"config file {path} is not valid JSON: {err}") from None
        if not isinstance(doc, dict):
            raise ContractError("config file must hold a JSON object")
        for key, val in doc.items():
            if key == "seed":
                cfg["seed"] = val
            elif key in STAGES:
                if not isinstance(val, dict):
                    raise ContractError(f"config section {key!r} must be an object")
                for k, v in val.items():
                    d = k.replace("-", "_")
                    stage_opts = {o.dest: o for o in STAGES[key]}
                    if d not in stage_opts:
                        raise ContractError(f"unknown config key {key}.{k}")
                    if key == stage:
                        opt = stage_opts[d]
                        cfg[d] = opt.type(v) if v is not None else None
                        if opt.choices and cfg[d] not in opt.choices:
                            raise ContractError(f"{key}.{k} must be one of {opt.choices}")
            else:
                raise ContractError(f"unknown config key {key!r}")
    for d in opts:
        v = getattr(ns, d, None)
        if v is not None:
            cfg[d] = v
    if ns.seed is not None:
        cfg["seed"] = ns.seed
    if not isinstance(cfg["seed"], int) or not 0 <= cfg["seed"] < 2**64:
        raise ContractError(f"seed must be an unsigned 64-bit integer, got {cfg['seed']!r}")
    for d, o in opts.items():
        if o.required and cfg[d] is None:
            raise MissingInputError(f"{stage} needs --{o.name}")
    for key in PATH_KEYS:
        if cfg.get(key):
            if not Path(cfg[key]).exists():
                raise MissingInputError(f"{key} {cfg[key]} not found")
            cfg[key] = str(Path(cfg[key]).resolve())
    return cfg


def run_stage(stage: str, cfg: dict, out) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    inputs = _input_files(cfg)
    metrics = RUNNERS[stage](cfg, out)
    manifest = {"stage": stage, "version": __version__, "config": cfg, "config_hash": config_hash(cfg),
                "seed": cfg["seed"], "inputs": inputs, "outputs": _files(out), "metrics": metrics}
    (out / MANIFEST).write_text(mio.canonical_json(manifest))
    return manifest


def rerun(manifest_path, out) -> dict:
    """Repeat a stage from its manifest and compare the new outputs with the recorded hashes."""
    path = Path(manifest_path)
    if path.is_dir():
        path = path / MANIFEST
    if not path.exists():
        raise MissingInputError(f"manifest {path} not found")
    old = json.loads(path.read_text())
    if old.get("stage") not in RUNNERS:
        raise ContractError(f"{path} is not a stage manifest")
    new = run_stage(old["stage"], old["config"], out)
    return {"stage": old["stage"], "identical": new["outputs"] == old["outputs"], "out": str(out)}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="motionwarp", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with a section per stage")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", required=True, help="output directory")
    sub = parser.add_subparsers(dest="stage", required=True)
    for stage, opts in STAGES.items():
        p = sub.add_parser(stage, parents=[common])
        for o in opts:
            default = "required" if o.required else repr(o.default)
            p.add_argument(f"--{o.name}", type=o.type, default=None, choices=o.choices,
                           help=f"{o.help} (default: {default})".lstrip())
    p = sub.add_parser("rerun", help="repeat a stage from its manifest")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        threads()
        if args.stage == "rerun":
            report = rerun(args.manifest, args.out)
        else:
            manifest = run_stage(args.stage, effective_config(args.stage, args), args.out)
            report = {"stage": args.stage, "out": args.out, "metrics": manifest["metrics"]}
    except MotionWarpError as err:
        print(json.dumps({"error": err.category, "message": str(err)}), file=sys.stderr)
        return err.exit_code
    print(json.dumps(report, default=mio._jsonable))
    return 0


if __name__ == "__main__":
    sys.exit(main())
