#!/usr/bin/env python3
"""Drive the control service the way the dashboard does: start a stream with
the HTTP service attached, poll metrics, change hot parameters through the
API (watch the tier routing), and answer a pending expert query by hand.
"""

import json
import socket
import threading
import time

import httpx
import numpy as np
import uvicorn

from careloop import cohort, outcome, policy
from careloop.online import HotParams, StreamLoop, replay_then_generate
from careloop.policy import QEnsemble
from careloop.server import attach_event_feed, build_app

transitions, manifest = cohort.generate_cohort(200, seed=3)
train, val = cohort.split_transitions(transitions, manifest)
stats = outcome.compute_reward_stats(train, manifest)
print("training a quick ensemble...")
heads = []
for seed in range(5):
    q, b, _ = policy.train_bcq(train, val, stats, seed=seed,
                               config=policy.PolicyTrainConfig(n_steps=1500,
                                                               eval_every=500))
    heads.append(q)

loop = StreamLoop(mode="ensemble", q_ensemble=QEnsemble(heads), stats=stats,
                  hot=HotParams(tau=0.2, rate_hz=20.0), k_batch=5, seed=0,
                  expert_mode="human", expert_timeout_s=3.0)
attach_event_feed(loop)

with socket.socket() as s:
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
server = uvicorn.Server(uvicorn.Config(build_app(loop), host="127.0.0.1",
                                       port=port, log_level="error"))
threading.Thread(target=server.run, daemon=True).start()
source = replay_then_generate(val, drift_at=200, seed=44)
worker = threading.Thread(target=lambda: loop.run(source, 400, paced=True),
                          daemon=True)
worker.start()
base = f"http://127.0.0.1:{port}"
time.sleep(1.0)

with httpx.Client(timeout=5) as c:
    print("\nGET /metrics ->")
    m = c.get(f"{base}/metrics").json()
    print(f"  step={m['step']} query_rate={m['query_rate']:.3f} "
          f"buffer={m['final_buffer']}")

    print("POST /params {'tau': 0.35} ->")
    r = c.post(f"{base}/params", json={"tau": 0.35}).json()["results"][0]
    print(f"  tier={r['tier']} applied={r['applied']} "
          f"effective_at_step={r['effective_at_step']}")

    print("POST /params {'gamma': 0.97} ->")
    r = c.post(f"{base}/params", json={"gamma": 0.97}).json()["results"][0]
    print(f"  tier={r['tier']} {r['message']}")

    print("POST /params {'architecture': 'wider'} ->")
    resp = c.post(f"{base}/params", json={"architecture": "wider"})
    print(f"  status={resp.status_code} detail={resp.json()['detail']}")

    # answer one pending expert query like a clinician would
    deadline = time.time() + 8
    pending = []
    while not pending and time.time() < deadline:
        pending = c.get(f"{base}/queries").json()["pending"]
        time.sleep(0.2)
    if pending:
        q0 = pending[0]
        print(f"\npending query qid={q0['qid']} proposed="
              f"{cohort.ACTIONS[q0['proposed']]} expires in "
              f"{q0['expires_in_s']:.1f}s")
        r = c.post(f"{base}/queries/{q0['qid']}/answer", json={"action": 4})
        print(f"  answered with Placebo -> {r.json()}")
    else:
        print("\n(no query became pending in time; timeouts fell back)")

    time.sleep(1.0)
    m = c.get(f"{base}/metrics").json()
    print(f"\nfinal snapshot: steps={m['steps']} labels={m['labels_added']} "
          f"updates={m['updates']} throughput={m.get('throughput_hz')}")

loop.halt()
server.should_exit = True
print("done")
