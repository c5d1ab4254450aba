"""``steglab`` command line: prepare -> embed -> train -> eval / features -> fuse."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import data, dctnet, fld, fusion, gfr, jpeg, trainer
from .manifest import RunManifest, file_sha256, inputs_digest
from .ndtensor import ContractError
from .stego import RNG_ALGORITHM, EmbedConfig, change_probability_map, embed, payload_to_change_rate

log = logging.getLogger("steglab")

SIMULATOR_NOTE = ("stego source: rate-matched random +-1 embedding over nonzero AC coefficients "
                  "(stand-in for J-UNIWARD)")


class CommandError(RuntimeError):
    pass


def _sub_seed(seed, index):
    return int(np.random.SeedSequence([seed, index]).generate_state(1, np.uint64)[0])


def _out_dir(path):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _rel(path, start):
    return Path(path).resolve().relative_to(Path(start).resolve()).as_posix() \
        if Path(path).resolve().is_relative_to(Path(start).resolve()) \
        else Path(path).resolve().as_posix()


# --------------------------------------------------------------------------
# synth / prepare / embed


def cmd_synth(args):
    out = _out_dir(args.out)
    imgs = data.synthetic_textures(args.count, args.size, args.seed)
    written = {}
    for i, img in enumerate(imgs):
        p = out / f"img{i:05d}.pgm"
        jpeg.write_pgm(p, img)
        written[p.name] = file_sha256(p)
    RunManifest("synth", {"count": args.count, "size": args.size},
                {"seed": args.seed}, outputs={"files": len(written)}).write(out)
    print(f"wrote {len(written)} PGM images to {out}")
    return 0


def cmd_prepare(args):
    src = Path(args.src)
    out = _out_dir(args.out)
    paths = sorted(src.glob("*.pgm"))
    if not paths:
        raise CommandError(f"no .pgm files in {src}")
    ok = 0
    for p in paths:
        try:
            pixels = jpeg.read_pgm(p)
            ci = data.prepare_cover(pixels, args.size, args.quality_factor)
        except (jpeg.PGMError, ContractError, OSError) as exc:
            log.warning("%s: skipped (%s)", p, exc)
            continue
        dst = out / f"{p.stem}.stgc"
        jpeg.save_coefficients(dst, ci)
        jpeg.load_coefficients(dst)
        ok += 1
    RunManifest("prepare", {"size": args.size, "quality_factor": args.quality_factor,
                            "resample": "bilinear"},
                inputs={"digest": inputs_digest(paths), "count": len(paths)},
                outputs={"written": ok, "failed": len(paths) - ok}).write(out)
    print(f"prepared {ok}/{len(paths)} covers at quality factor {args.quality_factor}")
    if ok == 0:
        raise CommandError("every input failed")
    return 0


def cmd_embed(args):
    cover_dir = Path(args.cover_dir)
    out = _out_dir(args.out)
    covers = sorted(cover_dir.glob("*.stgc"))
    if not covers:
        raise CommandError(f"no .stgc files in {cover_dir}")
    beta = payload_to_change_rate(args.payload_bpnzac)
    split_rng = np.random.Generator(np.random.PCG64(_sub_seed(args.seed, 0)))
    perm = split_rng.permutation(len(covers))
    n_val = int(round(args.val_fraction * len(covers)))
    val_idx = set(perm[:n_val].tolist())
    changes = {}
    rows = []
    for i, cp in enumerate(covers):
        ci = jpeg.load_coefficients(cp)
        st, n = embed(ci, EmbedConfig(args.payload_bpnzac, _sub_seed(args.seed, i + 1)), return_changes=True)
        dst = out / cp.name
        jpeg.save_coefficients(dst, st)
        jpeg.load_coefficients(dst)
        changes[cp.stem] = n
        rows.append((_rel(cp, out), dst.name, "val" if i in val_idx else "train"))
    data.write_pair_manifest(out / "pairs.csv", rows)
    RunManifest("embed", {"payload_bpnzac": args.payload_bpnzac, "beta": beta,
                          "val_fraction": args.val_fraction, "rng": RNG_ALGORITHM,
                          "note": SIMULATOR_NOTE},
                {"seed": args.seed}, {"digest": inputs_digest(covers), "count": len(covers)},
                {"changes": changes}).write(out)
    print(f"alpha={args.payload_bpnzac} bpnzAC -> beta={beta:.6f}; embedded {len(covers)} images")
    print(SIMULATOR_NOTE)
    return 0


# --------------------------------------------------------------------------
# train / eval


def _load_model_from_checkpoint(path, size=None):
    arch, meta, _ = dctnet.parse_checkpoint(Path(path).read_bytes())
    h, w = size or meta["input_hw"]
    g = dctnet.build(meta.get("variant"), h, w, tlu_threshold=meta.get("tlu_threshold", 8.0))
    dctnet.load_checkpoint(g, path)
    return g, meta


def cmd_train(args):
    pairs = Path(args.pairs)
    out = _out_dir(args.out)
    train_set = data.load_pairs(pairs, "train")
    val_set = data.load_pairs(pairs, "val")
    if len(train_set) == 0:
        raise CommandError(f"{pairs}: no training pairs")
    h, w = train_set.covers.shape[1:]
    base = trainer.TrainConfig(lr0=args.lr0, momentum=args.momentum, batch_pairs=args.batch_pairs,
                               seed=args.seed, dct_lr_mult=args.dct_lr_mult)
    cfg = base.scaled(args.max_iters) if args.scale_schedule else replace(base, max_iters=args.max_iters)
    if args.checkpoint_every:
        cfg = replace(cfg, checkpoint_every=args.checkpoint_every)
    g = dctnet.build(args.variant, h, w, seed=_sub_seed(args.seed, 0), tlu_threshold=args.tlu_threshold)
    if args.init:
        dctnet.load_checkpoint(g, args.init)

    def progress(it, loss, val_error):
        if it % max(1, cfg.checkpoint_every) == 0:
            log.info("iter %d loss %.5f val_error %s", it, loss, val_error)

    result = trainer.train(g, train_set, cfg, out, val_set if len(val_set) else None, progress)
    for _, path in result.checkpoints:
        dctnet.parse_checkpoint(Path(path).read_bytes())
    RunManifest("train", {**asdict(cfg), "variant": args.variant, "tlu_threshold": args.tlu_threshold,
                          "init": str(args.init) if args.init else "", "note": SIMULATOR_NOTE,
                          "rng": RNG_ALGORITHM},
                {"seed": args.seed}, {"pairs": file_sha256(pairs)},
                {"checkpoints": [Path(p).name for _, p in result.checkpoints]}).write(out)
    final = result.log[-1]
    print(f"trained {cfg.max_iters} iterations, final loss {final[2]:.5f}, "
          f"{len(result.checkpoints)} checkpoints in {out}")
    return 0


def cmd_eval(args):
    out = _out_dir(args.out)
    dataset = data.load_pairs(args.pairs, args.split)
    if len(dataset) == 0:
        raise CommandError(f"{args.pairs}: no pairs in split {args.split!r}")
    models = []
    rows = []
    for ck in args.checkpoints:
        g, meta = _load_model_from_checkpoint(ck, dataset.covers.shape[1:])
        models.append(g)
        rows.append((meta.get("iteration", 0), Path(ck).name, trainer.evaluate([g], dataset)))
    ensemble_error = trainer.evaluate(models, dataset)
    with open(out / "errors.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["model", "iteration", "error"])
        for it, name, err in rows:
            wr.writerow([name, it, repr(err)])
        wr.writerow([f"ensemble({len(models)})", "", repr(ensemble_error)])
    with open(out / "curve.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["iteration", "val_error"])
        for it, _, err in sorted(rows):
            wr.writerow([it, repr(err)])
    RunManifest("eval", {"split": args.split, "note": SIMULATOR_NOTE},
                inputs={"pairs": file_sha256(args.pairs), "checkpoints": inputs_digest(args.checkpoints)},
                outputs={"ensemble_error": ensemble_error}).write(out)
    print(f"{'model':<28}{'iteration':>10}{'error':>10}")
    for it, name, err in rows:
        print(f"{name:<28}{it:>10}{err:>10.4f}")
    print(f"{'ensemble of ' + str(len(models)):<28}{'':>10}{ensemble_error:>10.4f}")
    print(SIMULATOR_NOTE)
    return 0


# --------------------------------------------------------------------------
# features / fuse


def _split_rows(pairs, split):
    return [r for r in data.read_pair_manifest(pairs) if split is None or r[2] == split]


def cmd_features(args):
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = _split_rows(args.pairs, args.split)
    if not rows:
        raise CommandError(f"{args.pairs}: no pairs in split {args.split!r}")
    files = [(c, 0) for c, _, _ in rows] + [(s, 1) for _, s, _ in rows]
    names = [f"{Path(p).stem}:{'stego' if y else 'cover'}" for p, y in files]
    labels = [y for _, y in files]
    coeffs = [jpeg.load_coefficients(p) for p, _ in files]
    images = np.stack([jpeg.decompress_real(ci) for ci in coeffs])
    if args.kind == "cnn":
        if not args.checkpoints:
            raise CommandError("--kind cnn needs --checkpoints")
        per_model = []
        for ck in args.checkpoints:
            g, _ = _load_model_from_checkpoint(ck, images.shape[1:])
            per_model.append(np.vstack([dctnet.extract_features(g, images[s : s + 32, None])
                                        for s in range(0, len(images), 32)]))
        feats = np.concatenate(per_model, axis=1)
        config = {"kind": "cnn", "checkpoints": [Path(c).name for c in args.checkpoints]}
    else:
        bank = gfr.build_gabor_bank(tuple(args.scales), args.orientations)
        q = args.q if args.q else gfr.default_q(coeffs[0].qtable)
        if args.sca:
            feats = np.stack([gfr.extract_sca(img, bank, q, args.truncation,
                                              change_probability_map(ci, args.payload_bpnzac), ci.qtable)
                              for img, ci in zip(images, coeffs)])
        else:
            feats = np.stack([gfr.extract(img, bank, q, args.truncation) for img in images])
        config = {"kind": "gfr-sca" if args.sca else "gfr", "scales": list(bank.scales),
                  "orientations": bank.n_orient, "q": q, "T": args.truncation,
                  "payload_bpnzac": args.payload_bpnzac if args.sca else None}
    gfr.save_features(out, feats, gfr.config_hash(config), labels)
    out.with_suffix(".names").write_text("".join(n + "\n" for n in names))
    loaded, _ = gfr.load_features(out)
    if loaded.shape != feats.shape:
        raise CommandError(f"{out}: verification failed")
    RunManifest("features", config, inputs={"pairs": file_sha256(args.pairs)},
                outputs={"file": out.name, "shape": list(feats.shape)}).write(out.parent)
    print(f"wrote {feats.shape[0]} x {feats.shape[1]} features to {out}")
    return 0


def _load_feature_set(path):
    feats, _ = gfr.load_features(path)
    labels = gfr.load_labels(gfr.label_path(path))
    names_path = Path(path).with_suffix(".names")
    names = names_path.read_text().split() if names_path.exists() else [str(i) for i in range(len(feats))]
    if len(labels) != len(feats):
        raise CommandError(f"{path}: {len(feats)} rows but {len(labels)} labels")
    return feats, labels, names


def cmd_fuse(args):
    out = _out_dir(args.out)
    tr_cnn, y_tr, _ = _load_feature_set(args.train_cnn)
    tr_cls, y_tr2, _ = _load_feature_set(args.train_classical)
    te_cnn, y_te, names = _load_feature_set(args.test_cnn)
    te_cls, y_te2, _ = _load_feature_set(args.test_classical)
    if not (np.array_equal(y_tr, y_tr2) and np.array_equal(y_te, y_te2)):
        raise CommandError("CNN and classical feature files are not aligned")
    cfg = fusion.FusionConfig(n_cnn_models=args.n_cnn_models, n_cnn_classifiers=args.n_cnn_classifiers,
                              d_sub=args.d_sub, L=args.learners)
    fm = fusion.train_fusion(tr_cnn, tr_cls, y_tr, cfg, seed=args.seed)
    fusion.save_fusion(out / "fusion.stgu", fm)
    fusion.load_fusion(out / "fusion.stgu")
    probs = fusion.probabilities(fm, te_cnn, te_cls)
    fusion.write_report(out / "report.csv", names, probs, cfg.threshold)
    fused, labels = fusion.fuse(probs, cfg.threshold)
    err = float(np.mean(labels != y_te))
    cnn_only = float(np.mean(fusion.fuse(probs[:, :-1])[1] != y_te))
    classical_only = float(np.mean((probs[:, -1] > 0.5) != y_te))
    RunManifest("fuse", {**asdict(cfg), "note": SIMULATOR_NOTE}, {"seed": args.seed},
                {"train_cnn": file_sha256(args.train_cnn), "train_classical": file_sha256(args.train_classical),
                 "test_cnn": file_sha256(args.test_cnn), "test_classical": file_sha256(args.test_classical)},
                {"fused_error": err, "cnn_only_error": cnn_only,
                 "classical_only_error": classical_only}).write(out)
    print(f"fused error {err:.4f} (CNN-only {cnn_only:.4f}, classical-only {classical_only:.4f})")
    print(SIMULATOR_NOTE)
    return 0


# --------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="steglab", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write synthetic smoothed-texture PGM covers")
    s.add_argument("out")
    s.add_argument("--count", type=int, default=400)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("prepare", help="resize and JPEG-compress PGM images to STGC containers")
    s.add_argument("src")
    s.add_argument("out")
    s.add_argument("--size", type=int, default=256)
    s.add_argument("--quality-factor", type=int, default=75)
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("embed", help="simulate +-1 embedding and write a pair manifest")
    s.add_argument("cover_dir")
    s.add_argument("out")
    s.add_argument("--payload-bpnzac", type=float, default=0.4)
    s.add_argument("--val-fraction", type=float, default=0.25)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_embed)

    s = sub.add_parser("train", help="train the CNN (or an ablation variant)")
    s.add_argument("pairs")
    s.add_argument("out")
    s.add_argument("--variant", type=int, choices=dctnet.VARIANTS, default=None)
    s.add_argument("--tlu-threshold", type=float, default=dctnet.DEFAULT_TLU_THRESHOLD)
    s.add_argument("--max-iters", type=int, default=trainer.REFERENCE_ITERS)
    s.add_argument("--batch-pairs", type=int, default=16)
    s.add_argument("--lr0", type=float, default=0.001)
    s.add_argument("--momentum", type=float, default=0.9)
    s.add_argument("--dct-lr-mult", type=float, default=1.0,
                   help="learning-rate multiplier for the DCT preprocessing kernels")
    s.add_argument("--checkpoint-every", type=int, default=0,
                   help="override the (scaled) checkpoint interval")
    s.add_argument("--no-scale-schedule", dest="scale_schedule", action="store_false",
                   help="keep the 30,000/5,000-iteration LR step and checkpoint interval")
    s.add_argument("--init", help="checkpoint to fine-tune from")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="detection error of checkpoints and their probability ensemble")
    s.add_argument("pairs")
    s.add_argument("out")
    s.add_argument("--checkpoints", nargs="+", required=True)
    s.add_argument("--split", default="val")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("features", help="extract CNN (pooled) or Gabor-residual features")
    s.add_argument("pairs")
    s.add_argument("out", help="feature file (.stgf); labels and names are written next to it")
    s.add_argument("--kind", choices=("cnn", "gfr"), required=True)
    s.add_argument("--split", default=None)
    s.add_argument("--checkpoints", nargs="*")
    s.add_argument("--scales", type=float, nargs="+", default=list(gfr.DEFAULT_SCALES))
    s.add_argument("--orientations", type=int, default=gfr.DEFAULT_ORIENTATIONS)
    s.add_argument("--truncation", type=int, default=gfr.DEFAULT_T)
    s.add_argument("--q", type=float, default=None)
    s.add_argument("--sca", action="store_true", help="selection-channel-aware weighting")
    s.add_argument("--payload-bpnzac", type=float, default=0.4)
    s.set_defaults(func=cmd_features)

    s = sub.add_parser("fuse", help="train the CNN + classical FLD-ensemble fusion and report")
    s.add_argument("out")
    s.add_argument("--train-cnn", required=True)
    s.add_argument("--train-classical", required=True)
    s.add_argument("--test-cnn", required=True)
    s.add_argument("--test-classical", required=True)
    s.add_argument("--n-cnn-models", type=int, default=9)
    s.add_argument("--n-cnn-classifiers", type=int, default=6)
    s.add_argument("--d-sub", type=int, default=None)
    s.add_argument("--learners", type=int, default=fld.DEFAULT_L)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_fuse)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CommandError, ContractError, OSError, ValueError, trainer.TrainingDiverged) as exc:
        print(f"steglab {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
