"""Command-line entry point binding the package together: training, evaluation,
lowering, inference, cost tables, compression, and weights import/export.

Precedence: built-in defaults, then command-line flags, then the JSON config
file (a config file pins an experiment and wins over ad-hoc flags). Every run
writes a manifest recording the merged settings, seed, code version, and
SHA-256 digests of its file inputs.

Exit codes: 0 success, 1 usage error, 2 validation error, 3 runtime fault.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .codec import (
    Bitstream,
    decode_image,
    encode_image,
    extract_patches,
    ms_ssim,
    psnr,
)
from .costmodel import appendix_a, billions, cost_report, megabits, table_three
from .datasets import (
    gradient_tiles,
    load_cifar10,
    load_image_folder,
    read_image,
    striped_textures,
    to_unit_float,
    write_image,
)
from .integer import int_forward, lower, report_widths
from .models import (
    BOTTLENECK_KINDS,
    ModelConfig,
    PurenetConfig,
    build_nqe,
    build_purenet,
)
from .serialization import (
    dump_trace,
    export_weights,
    import_weights,
    load_decoder,
    load_lowered,
    save_decoder,
    save_lowered,
)
from .tensor import Tensor
from .training import TrainConfig, evaluate_accuracy, train_classifier, train_codec

_VARIANTS = {"purenet": "purenet", "pi": "pi_purenet", "bbd": "bbd"}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); usage errors are 1
        raise _UsageError(message)


# ---- settings merge and manifest ----------------------------------------------


def _merge_settings(args, keys: tuple[str, ...]) -> dict:
    """defaults -> flags -> config file, last writer wins."""
    merged = {k: getattr(args, k) for k in keys}
    if getattr(args, "config", None):
        loaded = json.loads(Path(args.config).read_text())
        unknown = sorted(set(loaded) - set(keys))
        if unknown:
            raise ValueError(f"unknown config keys {unknown}")
        merged.update(loaded)
    return merged


def _digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(args, command: str, settings: dict, inputs, outputs) -> None:
    manifest = {
        "command": command,
        "settings": settings,
        "seed": settings.get("seed"),
        "code_version": __version__,
        "inputs": {str(p): _digest(p) for p in inputs if p},
        "outputs": [str(p) for p in outputs if p],
    }
    path = Path(getattr(args, "manifest", None) or "nqe-manifest.json")
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _emit(record: dict) -> None:
    print(json.dumps(record, sort_keys=True))


# ---- table rendering -----------------------------------------------------------


def _aligned(rows: list[list[str]]) -> str:
    widths = [max(len(r[c]) for r in rows) for c in range(len(rows[0]))]
    lines = []
    for r in rows:
        cells = [c.ljust(w) if i == 0 else c.rjust(w)
                 for i, (c, w) in enumerate(zip(r, widths))]
        lines.append("  ".join(cells).rstrip())
    return "\n".join(lines) + "\n"


def _render_overview(F: int) -> str:
    cells = table_three(F)
    rows = [["precision", "memory [Mb]", "MACxbit [G]", "BOPs [G]"]]
    for mode in ("mixed", "binary"):
        c = cells[mode]
        rows.append([mode, str(c["memory_mb"]), str(c["mac_bit_g"]), str(c["bops_g"])])
    return _aligned(rows)


def _render_appendix(Fs=(32, 64, 128)) -> str:
    table = appendix_a(Fs)
    rows = [["bottleneck"] + [f"F={F} [Mb]" for F in Fs]]
    for kind in BOTTLENECK_KINDS:
        rows.append([kind] + [str(table["bottleneck"][kind][F]) for F in Fs])
    rows.append(["(encoder w/o bottleneck)"]
                + [str(table["without_bottleneck"][F]) for F in Fs])
    return _aligned(rows)


# ---- model/config assembly -----------------------------------------------------


_MODEL_KEYS = ("F", "G", "bottleneck", "precision", "input_hw", "num_classes", "seed")
_TRAIN_KEYS = (
    "batch_size", "epochs_stage1", "epochs_stage2", "lr_init", "lr_decay",
    "decay_period", "augment", "seed",
)
_DECODER_KEYS = ("patch", "n_feature", "pu_channels", "rc_blocks", "variant")


def _model_config(s: dict, decoder: PurenetConfig | None = None) -> ModelConfig:
    return ModelConfig(
        F=s["F"], G=s["G"], bottleneck_kind=s["bottleneck"],
        weight_mode=s["precision"], input_hw=s["input_hw"],
        num_classes=s["num_classes"], seed=s["seed"], decoder=decoder,
    )


def _train_config(s: dict) -> TrainConfig:
    return TrainConfig(
        batch_size=s["batch_size"], epochs_stage1=s["epochs_stage1"],
        epochs_stage2=s["epochs_stage2"], lr_init=s["lr_init"],
        lr_decay=s["lr_decay"], decay_period=s["decay_period"],
        seed=s["seed"], augment=s["augment"],
    )


def _decoder_config(s: dict) -> PurenetConfig:
    return PurenetConfig(
        n_feature=s["n_feature"], pu_channels=tuple(s["pu_channels"]),
        rc_blocks=s["rc_blocks"], variant=_VARIANTS[s["variant"]], patch=s["patch"],
    )


def _add_model_flags(p: argparse.ArgumentParser):
    p.add_argument("--F", type=int, default=8)
    p.add_argument("--G", type=int, default=4)
    p.add_argument("--bottleneck", choices=BOTTLENECK_KINDS, default="dwconv_fc")
    p.add_argument("--precision", choices=("mixed", "binary"), default="mixed")
    p.add_argument("--input-hw", type=int, default=8)
    p.add_argument("--num-classes", type=int, default=2)


def _add_train_flags(p: argparse.ArgumentParser):
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--epochs-stage1", type=int, default=1)
    p.add_argument("--epochs-stage2", type=int, default=1)
    p.add_argument("--lr-init", type=float, default=1e-3)
    p.add_argument("--lr-decay", type=float, default=0.8)
    p.add_argument("--decay-period", type=int, default=10)
    p.add_argument("--augment", action="store_true")
    p.add_argument("--samples", type=int, default=64,
                   help="bundled synthetic dataset size when --data is absent")


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON settings file; overrides flags")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--manifest", help="manifest path (default nqe-manifest.json)")


def _write_records(records, path) -> None:
    if path:
        with open(path, "w") as f:
            for r in records:
                f.write(json.dumps(r, sort_keys=True) + "\n")


# ---- subcommand handlers -------------------------------------------------------


def _cmd_train(args) -> int:
    keys = _MODEL_KEYS + _TRAIN_KEYS + ("samples",)
    if args.task == "codec":
        keys = keys + _DECODER_KEYS + ("stages", "stage_b_epochs", "stage_c_epochs")
    settings = _merge_settings(args, keys)
    tcfg = _train_config(settings)
    inputs = [args.config, args.data]

    if args.task == "classifier":
        mcfg = _model_config(settings)
        model = build_nqe(mcfg)
        if args.data:
            train_x, train_y, _, _ = load_cifar10(args.data)
            data = (train_x, train_y)
        else:
            data = striped_textures(
                settings["samples"], classes=mcfg.num_classes,
                hw=mcfg.input_hw, seed=settings["seed"],
            )
        records = train_classifier(model, data, tcfg)
        export_weights(model, args.out, include_proxies=True)
        _write_records(records, args.records)
        _emit({"trained": "classifier", "epochs": len(records),
               "final_loss": records[-1]["loss"],
               "final_accuracy": records[-1]["accuracy"]})
        outputs = [args.out, args.records]
    else:
        dcfg = _decoder_config(settings)
        mcfg = _model_config(
            {**settings, "input_hw": dcfg.patch, "num_classes": 2}, decoder=dcfg
        )
        encoder = build_nqe(mcfg)
        decoder = build_purenet(dcfg, mcfg.code_units, seed=settings["seed"])
        stages = tuple(settings["stages"])
        if args.data:
            images = load_image_folder(args.data, crop_multiple=dcfg.patch)
            patches = np.concatenate(
                [extract_patches(im, dcfg.patch).patches for im in images]
            )
            frames = None
            if len(stages) > 1:
                if len({im.shape for im in images}) != 1:
                    raise ValueError("frame stages need one shared resolution")
                frames = np.stack(images)
        else:
            patches = gradient_tiles(settings["samples"], hw=dcfg.patch,
                                     seed=settings["seed"])
            frames = gradient_tiles(max(2, settings["samples"] // 8),
                                    hw=2 * dcfg.patch, seed=settings["seed"] + 1)
        records = train_codec(
            encoder, decoder, patches, frames, tcfg, stages=stages,
            stage_b_epochs=settings["stage_b_epochs"],
            stage_c_epochs=settings["stage_c_epochs"],
        )
        export_weights(encoder, args.out, include_proxies=True)
        save_decoder(decoder, args.decoder_out)
        _write_records(records, args.records)
        _emit({"trained": "codec", "stages": list(stages),
               "epochs": len(records), "final_loss": records[-1]["loss"]})
        outputs = [args.out, args.decoder_out, args.records]

    _write_manifest(args, "train", settings, inputs, outputs)
    return 0


def _cmd_eval(args) -> int:
    settings = _merge_settings(args, ("samples", "seed", "use_integer"))
    model = import_weights(args.weights)
    if args.data:
        _, _, images, labels = load_cifar10(args.data)
    else:
        images, labels = striped_textures(
            settings["samples"], classes=model.config.num_classes,
            hw=model.config.input_hw, seed=settings["seed"],
        )
    if settings["use_integer"]:
        logits = int_forward(lower(model), images).logits
        acc = float(np.mean(np.argmax(logits, axis=1) == labels))
    else:
        acc = evaluate_accuracy(model, images, labels)
    _emit({"accuracy": acc, "samples": int(len(images)),
           "path": "integer" if settings["use_integer"] else "real"})
    _write_manifest(args, "eval", settings, [args.config, args.weights, args.data],
                    [])
    return 0


def _cmd_lower(args) -> int:
    model = import_weights(args.weights)
    im = lower(model)
    save_lowered(im, args.out)
    rows = [["step", "kind", "bits"]]
    for r in report_widths(im):
        bits = r.get("acc_bits", r.get("out_bits"))
        rows.append([r["name"], r["kind"], str(bits)])
    sys.stdout.write(_aligned(rows))
    _write_manifest(args, "lower", {"seed": None}, [args.weights], [args.out])
    return 0


def _cmd_infer(args) -> int:
    if (args.weights is None) == (args.lowered is None):
        raise ValueError("pass exactly one of --weights / --lowered")
    image = read_image(args.image)
    batch = image[None]

    if args.lowered:
        im = load_lowered(args.lowered)
        if image.shape[1:] != (im.input_hw, im.input_hw):
            raise ValueError(
                f"expected a {im.input_hw}x{im.input_hw} image, got {image.shape[1:]}"
            )
        result = int_forward(im, batch, trace=bool(args.trace))
        if args.trace:
            dump_trace(result.trace, args.trace)
        if args.codes:
            _emit({"codes": result.codes[0].astype(int).tolist()})
        else:
            _emit({"argmax": int(np.argmax(result.logits[0])),
                   "logits": result.logits[0].astype(int).tolist(),
                   "exponent": result.logit_exp})
    else:
        if args.trace:
            raise ValueError("activation traces need the lowered integer path")
        model = import_weights(args.weights)
        hw = model.config.input_hw
        if image.shape[1:] != (hw, hw):
            raise ValueError(f"expected a {hw}x{hw} image, got {image.shape[1:]}")
        x = Tensor(to_unit_float(batch))
        if args.codes:
            codes = model.encode(x, mode="infer").data[0]
            _emit({"codes": codes.astype(int).tolist()})
        else:
            logits = model.forward(x, mode="infer").data[0]
            _emit({"argmax": int(np.argmax(logits)), "logits": logits.tolist()})

    _write_manifest(args, "infer", {"seed": None},
                    [args.weights, args.lowered, args.image], [args.trace])
    return 0


def _cmd_cost(args) -> int:
    settings = _merge_settings(
        args, ("F", "G", "bottleneck", "precision", "mode", "records", "seed")
    )
    cfg = ModelConfig(F=settings["F"], G=settings["G"],
                      bottleneck_kind=settings["bottleneck"],
                      weight_mode=settings["precision"])
    rep = cost_report(cfg, compute_bits=settings["mode"])
    if settings["records"]:
        for r in rep.rows:
            _emit({"layer": r.name, "levels": r.weight_levels,
                   "input_bits": r.input_precision, "params": r.params,
                   "macs": r.macs, "naive_bits": r.naive_bits,
                   "mac_bit": r.mac_bit, "bops": r.bops})
    else:
        rows = [["layer", "levels", "in-bits", "params", "MACs"]]
        for r in rep.rows:
            rows.append([r.name, str(r.weight_levels), str(r.input_precision),
                         str(r.params), str(r.macs)])
        sys.stdout.write(_aligned(rows))
    print(f"memory [Mb]: {megabits(rep.naive_bits)}")
    print(f"MACxbit [G]: {billions(rep.mac_bit)}")
    print(f"BOPs [G]: {billions(rep.bops)}")
    _write_manifest(args, "cost", settings, [args.config], [])
    return 0


def _cmd_tables(args) -> int:
    if not args.appendix_a or args.overview:
        sys.stdout.write(_render_overview(args.F))
    if args.appendix_a or not args.overview:
        sys.stdout.write(_render_appendix())
    _write_manifest(args, "tables",
                    {"seed": None, "appendix_a": args.appendix_a,
                     "overview": args.overview, "F": args.F}, [], [])
    return 0


def _cmd_compress(args) -> int:
    if (args.weights is None) == (args.lowered is None):
        raise ValueError("pass exactly one of --weights / --lowered")
    encoder = load_lowered(args.lowered) if args.lowered else import_weights(args.weights)
    patch = encoder.input_hw if args.lowered else encoder.config.input_hw
    image = read_image(args.image)
    bs = encode_image(image, encoder, patch=patch)
    Path(args.out).write_bytes(bs.to_bytes())
    _emit({"bits": bs.bit_count, "bits_per_pixel": bs.bits_per_pixel,
           "rows": bs.rows, "cols": bs.cols})
    _write_manifest(args, "compress", {"seed": None},
                    [args.weights, args.lowered, args.image], [args.out])
    return 0


def _cmd_decompress(args) -> int:
    bs = Bitstream.from_bytes(Path(args.bitstream).read_bytes())
    decoder = load_decoder(args.decoder)
    want = _VARIANTS[args.variant]
    if decoder.cfg.variant != want:
        decoder = decoder.as_variant(want)
    recon = decode_image(bs, decoder)
    image = np.clip(np.rint(recon * 256.0), 0, 255).astype(np.uint8)
    write_image(image, args.out)
    record = {"height": bs.height, "width": bs.width, "variant": args.variant}
    if args.reference:
        ref = to_unit_float(read_image(args.reference))
        record["psnr_db"] = psnr(ref, recon)
        try:
            record["ms_ssim"] = ms_ssim(ref, recon)
        except ValueError:
            pass  # frame too small for the five-scale pyramid
    _emit(record)
    _write_manifest(args, "decompress", {"seed": None, "variant": args.variant},
                    [args.bitstream, args.decoder, args.reference], [args.out])
    return 0


def _cmd_export(args) -> int:
    model = import_weights(args.weights)
    export_weights(model, args.out, include_proxies=args.with_proxies)
    _emit({"exported": str(args.out), "proxies": bool(args.with_proxies)})
    _write_manifest(args, "export", {"seed": None,
                    "with_proxies": bool(args.with_proxies)},
                    [args.weights], [args.out])
    return 0


def _cmd_import(args) -> int:
    model = import_weights(args.weights)
    for name, layer in model.quantized_layers():
        record = {"layer": name, "levels": layer.n_levels,
                  "params": int(layer.w.data.size)}
        if layer.spec is not None:
            record["delta"] = layer.spec.delta
            record["tau"] = layer.spec.tau
        _emit(record)
    for name, layer in model.norm_layers():
        _emit({"norm": name, "shift": layer.bsn.shift_exp})
    _emit({"config": asdict(model.config)})
    _write_manifest(args, "import", {"seed": None}, [args.weights], [])
    return 0


# ---- parser --------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="nqe", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a classifier or codec")
    p.add_argument("--task", choices=("classifier", "codec"), default="classifier")
    p.add_argument("--data", help="CIFAR-10 pickle dir / image folder")
    p.add_argument("--out", required=True, help="weights file to write")
    p.add_argument("--decoder-out", help="decoder checkpoint (codec task)")
    p.add_argument("--records", help="JSONL training records path")
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--patch", type=int, default=8)
    p.add_argument("--n-feature", type=int, default=8)
    p.add_argument("--pu-channels", type=lambda s: tuple(int(x) for x in s.split(",")),
                   default=(16, 8))
    p.add_argument("--rc-blocks", type=int, default=1)
    p.add_argument("--variant", choices=sorted(_VARIANTS), default="pi")
    p.add_argument("--stages", type=lambda s: tuple(s.split(",")), default=("A",))
    p.add_argument("--stage-b-epochs", type=int, default=1)
    p.add_argument("--stage-c-epochs", type=int, default=1)
    _add_common(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="classification accuracy of a weights file")
    p.add_argument("--weights", required=True)
    p.add_argument("--data", help="CIFAR-10 pickle dir")
    p.add_argument("--samples", type=int, default=64)
    p.add_argument("--use-integer", action="store_true",
                   help="evaluate through the lowered integer path")
    _add_common(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("lower", help="lower a weights file to the integer program")
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=_cmd_lower)

    p = sub.add_parser("infer", help="run one image through a model")
    p.add_argument("--weights")
    p.add_argument("--lowered")
    p.add_argument("--image", required=True)
    p.add_argument("--codes", action="store_true", help="emit encoder bits")
    p.add_argument("--trace", help="write an activation trace dump")
    _add_common(p)
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("cost", help="per-layer cost table and totals")
    _add_model_flags(p)
    p.add_argument("--mode", choices=("entropy", "naive"), default="entropy")
    p.add_argument("--records", action="store_true",
                   help="line-delimited JSON instead of aligned text")
    _add_common(p)
    p.set_defaults(func=_cmd_cost)

    p = sub.add_parser("tables", help="reproduction tables")
    p.add_argument("--appendix-a", action="store_true",
                   help="bottleneck memory table only")
    p.add_argument("--overview", action="store_true",
                   help="headline memory/compute table only")
    p.add_argument("--F", type=int, default=64)
    _add_common(p)
    p.set_defaults(func=_cmd_tables)

    p = sub.add_parser("compress", help="image -> bitstream")
    p.add_argument("--weights")
    p.add_argument("--lowered")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=_cmd_compress)

    p = sub.add_parser("decompress", help="bitstream -> image")
    p.add_argument("--bitstream", required=True)
    p.add_argument("--decoder", required=True, help="decoder checkpoint npz")
    p.add_argument("--variant", choices=sorted(_VARIANTS), default="pi")
    p.add_argument("--reference", help="original image for a PSNR line")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=_cmd_decompress)

    p = sub.add_parser("export", help="rewrite a weights file (strip or keep proxies)")
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--with-proxies", action="store_true")
    _add_common(p)
    p.set_defaults(func=_cmd_export)

    p = sub.add_parser("import", help="validate a weights file and list its layers")
    p.add_argument("--weights", required=True)
    _add_common(p)
    p.set_defaults(func=_cmd_import)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (OSError, RuntimeError) as e:
        print(f"fault: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
