"""Roll the expert policy through one simulated day and print the trajectory.

Shows the oracle transition at work: storage charges from empty into the
20-80% band around midday solar, then holds there.

    python3 demos/expert_day.py
"""

from pinngrid.datasets import ExpertPolicy, rollout
from pinngrid.grid import load_default_case

case = load_default_case()
lay = case.layout
S, A, N = rollout(case, ExpertPolicy(case), horizon=96)
soc_max = case.storage[0].soc_max

print(" step  soc/max  gen_p(sum)  des_p   min|V|  max|V|")
for t in range(0, 96, 4):
    nxt = N[t]
    vm = nxt[lay.state["v_mag"]]
    print(f"{t:5d}  {nxt[lay.state['des_soc']][0] / soc_max:7.3f}  {nxt[lay.state['gen_p']].sum():10.4f}"
          f"  {nxt[lay.state['des_p']][0]:6.3f}  {vm.min():.4f}  {vm.max():.4f}")
print(f"voltage range over the day: [{N[:, lay.state['v_mag']].min():.4f}, {N[:, lay.state['v_mag']].max():.4f}]")
