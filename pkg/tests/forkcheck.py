"""Fork a finished run at every checkpoint and byte-compare the outcomes.

Run as a script with the project root, the run id, and the agent setup
path; prints a JSON verdict on stdout. Kept out of the test modules so the
forks execute in a process that never saw the original run: anything the
fork needs has to come from the store.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

from ncflow.agents import load_agent_setup
from ncflow.runtime import fork_run, snapshot_run
from ncflow.store import CaseStore


def main(argv: list[str]) -> int:
    root, run_id, agents_path = argv
    store = CaseStore(Path(root))
    doc = json.loads(Path(agents_path).read_text("utf-8"))
    base_dir = Path(agents_path).parent

    original = snapshot_run(store, run_id)
    failures = []
    seqs = store.checkpoint_seqs(run_id)
    for seq in seqs:
        ckpt = store.load_checkpoint(run_id, seq)
        forked = fork_run(
            store,
            run_id,
            ckpt.flow_index,
            agents=load_agent_setup(doc, base_dir),
        )
        status = forked.execute()
        if status != "completed":
            failures.append(
                {"seq": seq, "flow_index": ckpt.flow_index, "status": status}
            )
            continue
        for iid, ref in original.values.items():
            other = forked.values.get(iid)
            if other is None or other.canonical_bytes() != ref.canonical_bytes():
                failures.append(
                    {"seq": seq, "flow_index": ckpt.flow_index, "node": iid}
                )

    print(json.dumps({"checkpoints": len(seqs), "failures": failures}))
    return 0


if __name__ == "__main__":
    raise SystemExit(main(sys.argv[1:]))
