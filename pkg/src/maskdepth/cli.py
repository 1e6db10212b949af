"""Command-line client for the depth-completion service.

Every subcommand is a thin wrapper over one HTTP endpoint.  By default the
app is run in-process (no socket, nothing to start); ``--server URL``
points the same commands at a remote instance, and ``serve`` starts one.

Exit codes: 0 success, 1 verification failure, 2 usage error, 3 I/O error.
Artifacts written by a command are listed on stdout, one path per line.
"""

from __future__ import annotations

import argparse
import asyncio
import sys

import httpx

EXIT_OK = 0
EXIT_VERIFICATION = 1
EXIT_USAGE = 2
EXIT_IO = 3
_EXIT_BY_KIND = {"usage": EXIT_USAGE, "io": EXIT_IO,
                 "verification": EXIT_VERIFICATION}


def _request(server, path: str, payload: dict):
    """POST to a remote server, or to the app in-process when server is None."""
    if server:
        with httpx.Client(base_url=server, timeout=None) as client:
            r = client.post(path, json=payload)
            return r.status_code, r.json()

    from .service import create_app

    async def go():
        transport = httpx.ASGITransport(app=create_app())
        async with httpx.AsyncClient(transport=transport, timeout=None,
                                     base_url="http://service.internal") as client:
            r = await client.post(path, json=payload)
            return r.status_code, r.json()

    return asyncio.run(go())


def _call(args, path: str, payload: dict, render) -> int:
    try:
        status, body = _request(args.server, path, payload)
    except httpx.HTTPError as e:
        print(f"error (io): cannot reach {args.server}: {e}", file=sys.stderr)
        return EXIT_IO
    if status == 200:
        render(body)
        return EXIT_OK
    if isinstance(body, dict) and "kind" in body:
        kind, message = body["kind"], body.get("message", "")
    elif isinstance(body, dict) and "detail" in body:  # request model rejection
        kind, message = "usage", str(body["detail"])
    else:
        kind, message = "usage", str(body)
    print(f"error ({kind}): {message}", file=sys.stderr)
    return _EXIT_BY_KIND.get(kind, EXIT_VERIFICATION)


def _print_artifacts(body: dict) -> None:
    for path in body.get("artifacts", []):
        print(path)


def _parse_size(text: str):
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"size must look like 256x512, got {text!r}") from None


def _parse_setting(text: str):
    if "=" not in text:
        raise argparse.ArgumentTypeError(
            f"settings are key=value, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_gen_data(args) -> int:
    height, width = args.size
    payload = {"out_dir": args.out, "count": args.count, "seed": args.seed,
               "height": height, "width": width, "objects": args.objects}

    def render(body):
        print(f"generated {len(body['train_ids'])} train + "
              f"{len(body['val_ids'])} val samples under {body['root']}")
        _print_artifacts(body)

    return _call(args, "/v1/gen-data", payload, render)


def _cmd_train(args) -> int:
    payload = {"data_dir": args.data, "out_dir": args.out,
               "config_path": args.config, "preset": args.preset,
               "overrides": dict(args.set or []),
               "resume_from": args.resume}

    def render(body):
        print(f"trained to step {body['final_step']}: "
              f"loss {body['initial_loss']:.4f} -> {body['final_loss']:.4f} "
              f"in {body['elapsed_seconds']:.0f}s")
        print(f"val mae {body['val_final_mae']:.4f} "
              f"rmse {body['val_final_rmse']:.4f} (meters)")
        _print_artifacts(body)

    return _call(args, "/v1/train", payload, render)


def _cmd_eval(args) -> int:
    payload = {"data_dir": args.data, "checkpoint": args.checkpoint,
               "split": args.split, "oracle": args.oracle,
               "report_path": args.report}

    def render(body):
        for row in body["per_sample"]:
            print(f"sample {row['scene_id']}: mae {row['mae']:.4f} "
                  f"rmse {row['rmse']:.4f} n_valid {row['n_valid']}")
        agg = body["aggregate"]
        print(f"aggregate: mae {agg['mae']:.4f} rmse {agg['rmse']:.4f} "
              f"n_valid {agg['n_valid']}")
        _print_artifacts(body)

    return _call(args, "/v1/eval", payload, render)


def _cmd_infer(args) -> int:
    payload = {"checkpoint": args.checkpoint, "sample_dir": args.sample,
               "out_dir": args.out, "keep_prob": args.keep_prob,
               "seed": args.seed}

    def render(body):
        print(f"final mae {body['mae_final']:.4f} rmse {body['rmse_final']:.4f}"
              f" | initial mae {body['mae_init']:.4f} "
              f"rmse {body['rmse_init']:.4f}")
        _print_artifacts(body)

    return _call(args, "/v1/infer", payload, render)


def _cmd_gradcheck(args) -> int:
    payload = {"scope": args.scope, "seed": args.seed}

    def render(body):
        for row in body["checks"]:
            mark = "pass" if row["passed"] else "FAIL"
            print(f"{row['name']}: max rel error {row['max_rel_error']:.3e} "
                  f"(tolerance {row['tolerance']:.1e}) {mark}")
        print("all checks passed" if body["ok"] else "checks failed")

    return _call(args, "/v1/gradcheck", payload, render)


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=args.host, port=args.port)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maskdepth",
        description="instance-aware depth completion: data, training, "
                    "evaluation, inference")
    parser.add_argument("--server", default=None,
                        help="URL of a running service; default runs in-process")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=_parse_size, default=(256, 512),
                   metavar="HxW")
    p.add_argument("--objects", type=int, default=6)
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--preset", default=None, choices=["desk"])
    p.add_argument("--set", type=_parse_setting, action="append",
                   metavar="KEY=VALUE", help="override one config value")
    p.add_argument("--resume", default=None, help="checkpoint to continue")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--split", default="val", choices=["train", "val"])
    p.add_argument("--oracle", action="store_true",
                   help="score ground truth against itself (plumbing check)")
    p.add_argument("--report", default=None, help="report file path")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("infer", help="run one sample and write the panel strip")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sample", required=True, help="one sample directory")
    p.add_argument("--out", required=True)
    p.add_argument("--keep-prob", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=_cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    p.add_argument("--scope", default="all", choices=["op", "pipeline", "all"])
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_gradcheck)

    p = sub.add_parser("serve", help="start the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(fn=_cmd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
