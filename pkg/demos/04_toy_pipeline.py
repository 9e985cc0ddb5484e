"""
A miniature end-to-end run
==========================

Trains a very small modulation model and a latent denoiser on a handful of
shapes, then samples, completes a partial cloud and scores the results.
Everything here is sized to finish in a few minutes; the numbers are not
meant to be good.
"""

import numpy as np

from latent_sdf import pipeline
from latent_sdf.geometry import mesh_sample_points, partial_from_full
from latent_sdf.metrics import tmd, uhd, unconditional_metrics

rng = np.random.default_rng(0)
train = pipeline.make_records(16, rng, 1024, prefix="train")
test = pipeline.make_records(4, rng, 1024, prefix="test")

small = dict(latent_dim=16, feature_dim=32, sdf_width=48, sdf_hidden=4, n_points=256,
             n_queries=256, log_every=100)

# %%
# Stage 1: point-cloud encoder, VAE bottleneck and SDF decoder.
mod_cfg = pipeline.TrainConfig(phase="modulation", seed=0, steps=400, lr=1e-3, **small)
mod_ckpt = pipeline.train_modulation(mod_cfg, train)
print("modulation L1:", [round(r["l1"], 4) for r in mod_ckpt.loss_log])
mod = pipeline.load_modulation(mod_ckpt)

# %%
# Stage 2: a conditional denoiser on the posterior-mean latents.  Its partial-cloud
# encoder starts from the modulation encoder.
latents = pipeline.extract_latents(mod, train, small["n_points"])
print("latent std:", latents.std().round(3))
diff_cfg = pipeline.TrainConfig(phase="diffusion", seed=1, steps=300, batch_size=16, lr=1e-3,
                                model_dim=32, blocks=2, T=100, beta_T=0.1, **small)
diff_ckpt = pipeline.train_diffusion(diff_cfg, latents, train, pipeline.encoder_state(mod))
diff = pipeline.load_denoiser(diff_ckpt)
schedule = pipeline.schedule_for(diff_ckpt)

# %%
# Unconditional samples (the condition is the zero mask) against held-out shapes.
gens = pipeline.generate(mod, diff, schedule, 4, resolution=32, seed=5)
clouds = [np.zeros((1, 3)) if g.empty else mesh_sample_points(g.mesh, 1024, rng) for g in gens]
print("empty samples:", sum(g.empty for g in gens))
print(unconditional_metrics(clouds, [r.cloud for r in test]))

# %%
# Completion of a cropped view of a held-out shape, with CONS for each candidate.
partial = partial_from_full(test[0].cloud, rng)
comps = pipeline.generate(mod, diff, schedule, 4, partial, resolution=32, seed=6)
comp_clouds = [np.zeros((1, 3)) if g.empty else mesh_sample_points(g.mesh, 1024, rng)
               for g in comps]
print("CONS:", [round(g.cons, 4) for g in comps])
print("UHD:", round(uhd(partial, comp_clouds), 4), " TMD:", round(tmd(comp_clouds), 5))
