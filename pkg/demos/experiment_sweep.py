"""Harness in a script: pretrain, sweep strategies, forgetting table, merged report."""
import sys

from fstta import harness

out = sys.argv[1] if len(sys.argv) > 1 else "runs/demo"
cfg = harness.RunConfig(output_dir=out, stream_count=100, shuffles=3,
                        strategies="NoAdapt,Tent-INT-1,FastOnly,FSTTA")
harness.cmd_pretrain(cfg)
harness.cmd_run(cfg)
for row in harness.cmd_forgetting(cfg):
    print(row["condition"], round(row["SR"], 2))
text, _ = harness.cmd_compare([f"{out}/results.csv"])
print(text)
