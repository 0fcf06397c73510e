"""One slot by hand: a single EV group bids into a one-bus market.

The group holds 10 kW of backlog with a 4 kW cap and V = 2, so its bid is
u(x) = 5x - x^2/4.  Against a generator costing p^2/2 the market clears at
x = 10/3, and the group's own best response at that price is the same 10/3.
"""

from evbid.bidding import build_bid_curve, sample_curve
from evbid.market import Generator, Network, clear_p4, refine_p5
from evbid.scheduler import QueueState, SchedulerParams, solve_p2

queues = QueueState([10.0], [0.0])
caps = [4.0]
V = 2.0

curve = build_bid_curve(queues, caps, V)
print("bid segments:")
for s in curve.segments:
    print(f"  x in [{s.x_lo:g}, {s.x_hi:g}]  marginal {s.price_hi:g} -> {s.price_lo:g}")
print(f"u(2) = {curve.value(2.0):g}, u(4) = {curve.value(4.0):g}")

net = Network(1, [Generator(0, a=0.5)], [])
for M in (11, 51, 101):
    p4 = clear_p4(net, [0], [sample_curve(curve, M)], t=0)
    print(f"M={M:4d}: sampled clearing x = {p4.allocations[0]:.6f}")
p5 = refine_p5(net, [0], [curve], p4, t=0)
price = p5.lmps[0]
print(f"refined clearing x = {p5.allocations[0]:.12f}, price = {price:.12f}")

own = solve_p2(price, queues, caps, SchedulerParams(V, [1.0], [12]))
print(f"group's own response at that price: {own[0]:.12f}")
