"""Compare uncontrolled charging with rolling-horizon dispatch on two days."""

from voltmesh import RhoConfig, RhoPolicy, UncontrolledPolicy, generate_synthetic, rollout

scenario = generate_synthetic(3, days=2, seed=11)
runs = {
    "uncontrolled": UncontrolledPolicy(scenario.station),
    "rho perfect": RhoPolicy(RhoConfig(forecast="perfect"), scenario),
    "rho persistence": RhoPolicy(RhoConfig(forecast="persistence"), scenario),
    "rho fixed k=16": RhoPolicy(RhoConfig(window="fixed", k=16), scenario),
}
print(f"{'policy':18s} {'cost':>9s} {'completion':>11s} {'dispersion':>11s}")
for name, policy in runs.items():
    m = rollout(scenario, policy).metrics()
    print(f"{name:18s} {m['total_cost']:9.3f} {m['completion']:10.1f}% {m['fairness_dispersion']:10.2f}")
