"""Tour of the networks: parameter counts per stage, the residual identities and where z can act."""
import torch

from pmcgan import cascade as cs
from pmcgan import networks as nw
from pmcgan.dataset import get_stage

torch.manual_seed(0)


def count(module):
    return sum(p.numel() for p in module.parameters())


for stage in (1, 2, 3):
    spec = nw.GeneratorSpec(stage=stage)
    G, E, D_img, D_ped = nw.build_stage_modules(spec)
    print(f"stage {stage}: input {spec.input_channels} ch @ {get_stage(stage).resolution}px | "
          f"G {count(G) / 1e6:.2f}M  E {count(E) / 1e6:.2f}M  D {2 * count(D_img) / 1e6:.2f}M (two)")

# zeroing the residual branch turns both blocks into the identity
msrb, carb = nw.MSRB(64), nw.CARB(64)
with torch.no_grad():
    for p in list(msrb.parameters()) + list(carb.body.parameters()):
        p.zero_()
x = torch.randn(1, 64, 16, 16)
print("MSRB identity diff:", (msrb(x) - x).abs().max().item(), "| CARB identity diff:", (carb(x) - x).abs().max().item())

# the latent code is masked before injection: an empty mask leaves nothing for z to change
G = nw.UMARGenerator(nw.GeneratorSpec()).eval()
cond = torch.zeros(1, 40, 64, 64)
cond[:, 3 + 7] = 1  # all road
with torch.no_grad():
    a, b = G(cond, torch.randn(1, 16)), G(cond, torch.randn(1, 16))
    print("empty mask, two codes, max diff:", (a - b).abs().max().item())
    cond[:, 38, 16:48, 24:40] = 1
    a, b = G(cond, torch.randn(1, 16)), G(cond, torch.randn(1, 16))
    inside = (a - b).abs()[..., 16:48, 24:40].mean().item()
    print(f"with a pedestrian mask: mean change inside {inside:.2e}")

# stage 2 sees the stage-1 output upsampled next to its own condition stack
cond2 = torch.zeros(1, 40, 128, 128)
print("integrated stage-2 input:", tuple(cs.integrate_stages(torch.zeros(1, 3, 64, 64), cond2).shape))
