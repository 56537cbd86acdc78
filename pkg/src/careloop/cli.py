"""Command-line entry points for every pipeline stage.

    careloop generate    --run runs/demo --patients 2000 --seed 0
    careloop deid        --policy policy.json --in raw.jsonl --out clean.jsonl --audit audit.jsonl
    careloop train-twin  --run runs/demo
    careloop train-outcome --run runs/demo
    careloop train-policy  --run runs/demo [--kinds BCQ DQN ...]
    careloop eval-offline  --run runs/demo
    careloop stream      --run runs/demo --tau 0.2 --rate 10 --k 20 --steps 2000 --drift-at 1000 --expert simulated
    careloop report      --run runs/demo --patient 12
    careloop serve       --run runs/demo --port 8400 --expert human
"""

from __future__ import annotations

import argparse
import json
import sys
import threading
from pathlib import Path

from . import deid as deid_mod
from . import online, workflows
from .workflows import PipelineScale


def _scale_from(args) -> PipelineScale:
    scale = PipelineScale.small() if getattr(args, "small", False) else PipelineScale()
    if getattr(args, "patients", None):
        scale.n_patients = args.patients
    return scale


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="careloop")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate the synthetic cohort")
    p.add_argument("--run", required=True)
    p.add_argument("--patients", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--horizon", type=int, default=50)

    p = sub.add_parser("deid", help="de-identify a raw record corpus")
    p.add_argument("--policy", help="policy JSON document")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", dest="out_path", required=True)
    p.add_argument("--audit", dest="audit_path", required=True)

    for name in ("train-twin", "train-outcome", "eval-offline"):
        p = sub.add_parser(name)
        p.add_argument("--run", required=True)
        p.add_argument("--small", action="store_true")

    p = sub.add_parser("train-policy")
    p.add_argument("--run", required=True)
    p.add_argument("--small", action="store_true")
    p.add_argument("--kinds", nargs="*", default=["BCQ", "DQN", "DoubleDQN", "NFQ", "CQL"])

    p = sub.add_parser("stream", help="run the online loop")
    p.add_argument("--run", help="run directory with trained artifacts")
    p.add_argument("--policy", help="policies directory (defaults to <run>/policies)")
    p.add_argument("--twin", help="twin ensemble directory")
    p.add_argument("--outcome", help="outcome checkpoint")
    p.add_argument("--tau", type=float, default=0.2)
    p.add_argument("--rate", type=float, default=10.0)
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--drift-at", type=int, default=1000)
    p.add_argument("--expert", choices=["simulated", "human"], default="simulated")
    p.add_argument("--mode", choices=["ensemble", "single", "bcq"], default="ensemble")
    p.add_argument("--unpaced", action="store_true")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("report", help="render one patient's HTML report")
    p.add_argument("--run", required=True)
    p.add_argument("--patient", type=int, required=True)

    p = sub.add_parser("serve", help="stream with the control service attached")
    p.add_argument("--run", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8400)
    p.add_argument("--steps", type=int, default=20000)
    p.add_argument("--drift-at", type=int, default=1000)
    p.add_argument("--tau", type=float, default=0.2)
    p.add_argument("--rate", type=float, default=10.0)
    p.add_argument("--expert", choices=["simulated", "human"], default="human")
    p.add_argument("--seed", type=int, default=0)

    args = parser.parse_args(argv)

    if args.command == "generate":
        path, manifest = workflows.run_generate(args.run, args.patients, args.seed,
                                                horizon=args.horizon)
        print(f"wrote {manifest['n_transitions']} transitions to {path}")
    elif args.command == "deid":
        pol = (deid_mod.DeidPolicy.from_file(args.policy) if args.policy
               else deid_mod.DeidPolicy(pseudonym_salt="workbench-salt"))
        out, report = workflows.run_deid(Path(args.out_path).parent, policy_doc=pol,
                                         raw_path=args.in_path, out_path=args.out_path,
                                         audit_path=args.audit_path)
        print(f"k={report.k} pass={report.ok} classes={len(report.class_sizes)} -> {out}")
    elif args.command == "train-twin":
        out = workflows.run_train_twin(args.run, _scale_from(args))
        print(f"twin ensemble saved to {out}")
    elif args.command == "train-outcome":
        out = workflows.run_train_outcome(args.run, _scale_from(args))
        print(f"outcome model saved to {out}")
    elif args.command == "train-policy":
        out = workflows.run_train_policies(args.run, _scale_from(args),
                                           kinds=tuple(args.kinds))
        print(f"policies saved to {out}")
    elif args.command == "eval-offline":
        table = workflows.run_eval_offline(args.run, _scale_from(args))
        print(json.dumps(table, indent=2, sort_keys=True))
    elif args.command == "stream":
        loop, snap, log_path = workflows.run_stream(
            args.run, steps=args.steps, drift_at=args.drift_at, tau=args.tau,
            rate_hz=args.rate, k=args.k, expert_mode=args.expert, mode=args.mode,
            paced=not args.unpaced, seed=args.seed)
        print(json.dumps({k: snap[k] for k in
                          ("steps", "query_rate", "updates", "final_buffer",
                           "throughput_hz", "mean_latency_s")}, indent=2))
        print(f"log: {log_path}")
    elif args.command == "report":
        html = workflows.build_patient_report(args.run, args.patient)
        out = Path(args.run) / "reports" / f"patient_{args.patient}.html"
        print(f"wrote {out} ({len(html)} bytes)")
    elif args.command == "serve":
        from . import server as server_mod
        loop = workflows.build_stream_loop(
            args.run, tau=args.tau, rate_hz=args.rate,
            expert_mode=args.expert, seed=args.seed,
            log_path=Path(args.run) / "stream" / "serve_log.jsonl")
        server_mod.attach_event_feed(loop)
        _, manifest, train, val = workflows._load_split(args.run)
        source = online.replay_then_generate(val, drift_at=args.drift_at, seed=777)
        worker = threading.Thread(
            target=lambda: loop.run(source, args.steps, paced=True), daemon=True)
        worker.start()

        from . import cohort as cohort_mod
        firsts = {str(tr.patient_id): tr.state for tr in train + val if tr.t == 0}

        def report_builder(state, patient_id):
            stat = online.uncertainty(state, loop.q_ensemble) if loop.q_ensemble \
                else None
            u = stat.u_tilde if stat else 0.0
            action = int(stat.mu.argmax()) if stat else 0
            from . import evalkit
            inputs = evalkit.build_report_inputs(
                state, twin_ens=loop.twin, outcome_model=loop.outcome,
                stats=loop.stats, action=action, u_tilde=u)
            return evalkit.render_report(state, inputs, patient_id=patient_id)

        server_mod.serve(loop, host=args.host, port=args.port,
                         report_source=lambda pid: firsts.get(str(pid)),
                         report_builder=report_builder)
    return 0


if __name__ == "__main__":
    sys.exit(main())
