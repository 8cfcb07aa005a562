"""Compare the cost of three attention blocks at a 128 x 16^3 bottleneck.

    python demos/02_attention_costs.py
"""
from cganet.complexity import analyze, human, preset

rows = ["self-attention", "cp-block", "sam-r8", "sam-r4", "sam-r2"]
print(f"{'block':<16s}{'FLOPs':>10s}{'params':>10s}")
for name in rows:
    rep = analyze(preset(name))
    print(f"{name:<16s}{human(rep.total_flops, 'G'):>10s}{human(rep.total_params, 'M'):>10s}")

# The N x N similarity matrix is what makes self-attention expensive:
sa = analyze(preset("self-attention"))
for node in sa.nodes:
    if node.flops:
        print(f"  {node.name:<10s} {node.flops:>14,d}")

# Counting a multiply-accumulate as two operations doubles everything.
print("sam-r8 in flop mode:", human(analyze(preset("sam-r8"), "flop").total_flops, "G"))
