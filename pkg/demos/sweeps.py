"""How V and alpha trade cost against service on the desk scenario.

Larger V weights cost more heavily, so the aggregators buy less and finish
fewer EVs.  Larger alpha grows the delay queue faster and pulls charging
earlier.
"""

from evbid import harness, scenario

sc = scenario.bundled("paper-desk")

print("   V   total cost  completion")
for V, s in harness.sweep(sc, "V", [1, 40, 80, 120]).items():
    print(f"{V:4g}  {s.total_cost:11.1f}  {s.completion_rate:10.3f}")

print("\nalpha  mean delay  completion")
for a, s in harness.sweep(sc, "alpha", [1, 50, 200, 800]).items():
    print(f"{a:5g}  {harness.mean_delay(s):10.2f}  {s.completion_rate:10.3f}")
