"""``beryllium-testkit run <spec.json>``: boot a topology for manual experiments."""

from __future__ import annotations

import argparse
import signal
import threading

from beryllium.testkit.topology import TopologySpec, spawn_topology


def main(argv: list[str] | None = None) -> int:
    p = argparse.ArgumentParser(prog="beryllium-testkit")
    sub = p.add_subparsers(dest="cmd", required=True)
    run = sub.add_parser("run", help="boot the topology described by a JSON spec")
    run.add_argument("spec")
    run.add_argument("--workdir")
    args = p.parse_args(argv)

    topo = spawn_topology(TopologySpec.load(args.spec), workdir=args.workdir)
    print(f"workdir  {topo.workdir}")
    print(f"broker   {topo.broker_url}")
    print(f"index    {topo.index_url}")
    print(f"lnb      {topo.lnb_url}")
    for ce_id, url in topo.ce_urls.items():
        print(f"{ce_id:<8} {url}")
    print(f"export BERYLLIUM_BROKER_URL={topo.broker_url} BERYLLIUM_LNB_URL={topo.lnb_url}", flush=True)

    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *a: stop.set())
    try:
        stop.wait()
    except KeyboardInterrupt:
        pass
    finally:
        topo.teardown()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
