"""Online learning under a steering bias.

Pre-trains the controller inside the frozen GVM, then drives three laps of the
oval with a +2.5 deg steering bias while both networks keep learning. MPC and
Stanley drive the same laps for comparison.
"""
from glclab.episode import simulate
from glclab.glc import GlcPolicy
from glclab.harness import MpcPolicy, StanleyPolicy, train_glc_checkpoint, train_gvm_checkpoint
from glclab.metrics import compute_metrics
from glclab.plant import Perturbation, get_profile
from glclab.track import load_track

params = get_profile("profile-A")
path = load_track("oval")
d1 = Perturbation.named("d1")

gvm, _ = train_gvm_checkpoint(params, None, epochs=5, steps=1200, seed=42)
glc, curve = train_glc_checkpoint(params, gvm, ("oval", "figure_eight", "chicane"), None, seed=42)
print("GLC pre-training losses:", ", ".join(f"{v:.3f}" for v in curve))

policies = {"glc": GlcPolicy(glc, gvm), "mpc": MpcPolicy(params), "stanley": StanleyPolicy(params)}
print(f"\n{'':8s} {'lap RMSE (m)':>26s}   {'lap mean signed error (m)':>30s}   max steer rate")
for name, policy in policies.items():
    rep = compute_metrics(simulate(policy, params, path, d1, laps=3))
    rmse = " ".join(f"{v:.3f}" for v in rep.lap_rmse)
    mean = " ".join(f"{v:+.4f}" for v in rep.lap_mean_signed)
    print(f"{name:8s} {rmse:>26s}   {mean:>30s}   {rep.steer_rate_max:.2f} rad/s")
