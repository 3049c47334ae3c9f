"""Notification delay and delivery rate, server-centric relay against direct observation.

Run with ``python3 demos/delivery_sweep.py``; takes a few seconds.
"""

from lwm2m_c2c.netsim import message_count_energy_proxy
from lwm2m_c2c.scenario import ScenarioConfig, run_scenario

print("median delay at a 1 s interval, 500 updates")
print(f"  {'forwarders':>10}  {'c2c':>9}  {'server-centric':>14}")
for fwd in range(4):
    c2c = run_scenario(ScenarioConfig(scenario="c2c", forwarders=fwd, seed=1))
    sc = run_scenario(ScenarioConfig(scenario="server-centric", forwarders=fwd, seed=1))
    print(f"  {fwd:>10}  {c2c.median_delay_ms:7.2f}ms  {sc.median_delay_ms:12.2f}ms")

print("\ndelivery rate and goodput by update interval")
print(f"  {'interval':>8}  {'c2c rate':>8}  {'c2c B/s':>8}  {'sc rate':>8}  {'sc B/s':>8}  {'optimum':>8}")
for interval in (1000, 200, 100, 50, 20, 10, 5):
    c2c = run_scenario(ScenarioConfig(scenario="c2c", interval_ms=interval, seed=1))
    sc = run_scenario(ScenarioConfig(scenario="server-centric", interval_ms=interval, seed=1))
    print(f"  {interval:>6}ms  {c2c.delivery_rate:8.3f}  {c2c.goodput_bps:8.2f}  "
          f"{sc.delivery_rate:8.3f}  {sc.goodput_bps:8.2f}  {c2c.optimum_bps:8.1f}")

print("\nframes on the air, two forwarders per side, 500 updates at 1 s")
for kind in ("c2c", "server-centric"):
    frames = message_count_energy_proxy(run_scenario(ScenarioConfig(scenario=kind, forwarders=2, seed=1)))
    busiest = {k: v["total"] for k, v in frames.items() if v["total"]}
    print(f"  {kind:<15} total {sum(busiest.values()):6d}  {busiest}")
