import pytest
import torch

from dualharm.discriminator import (
    Discriminator,
    DiscriminatorConfig,
    FrequencyBranch,
    assemble_freq_map,
    reassemble_patches,
    split_patches,
)
from fdcheck import max_rel_err_vs_fd

WIDTH = 0.125


def make_disc(n=4, use_freq=True, seed=0):
    return Discriminator(
        DiscriminatorConfig(n=n, width_multiplier=WIDTH, use_freq_branch=use_freq, seed=seed)
    )


class TestSpatialBranch:
    def test_shapes_256_n4(self):
        d = make_disc(n=4).eval()
        with torch.no_grad():
            fds, fdm = d.spatial_features(torch.rand(1, 3, 256, 256))
        assert fds.shape == (1, 64, 4, 4)  # 512 * 1/8 channels, 256 / 2^6 grid
        assert fdm.shape == (1, 32, 32, 32)  # tap after block 3: 256 / 8

    def test_shapes_128_n2(self):
        d = make_disc(n=2).eval()
        with torch.no_grad():
            fds, fdm = d.spatial_features(torch.rand(1, 3, 128, 128))
        assert fds.shape[-2:] == (2, 2)
        assert fdm.shape[-2:] == (16, 16)

    def test_wrong_size_rejected(self):
        d = make_disc(n=4)
        with pytest.raises(ValueError, match=r"64\*n = 256"):
            d.spatial_features(torch.rand(1, 3, 128, 128))

    def test_eval_mode_deterministic(self):
        d = make_disc(n=2).eval()
        x = torch.rand(2, 3, 128, 128)
        with torch.no_grad():
            a = d(x)
            b = d(x)
        assert torch.equal(a, b)


class TestSplitPatches:
    def test_sixteen_8x8_patches(self):
        fdm = torch.randn(1, 5, 32, 32)
        patches = split_patches(fdm, 4)
        assert patches.shape == (1, 4, 4, 5, 8, 8)
        # patch (i, j) covers rows [i*8, (i+1)*8)
        assert torch.equal(patches[0, 1, 2], fdm[0, :, 8:16, 16:24])

    def test_reassemble_is_inverse(self):
        fdm = torch.randn(2, 3, 16, 16)
        assert torch.equal(reassemble_patches(split_patches(fdm, 4)), fdm)

    def test_single_patch(self):
        fdm = torch.randn(1, 2, 8, 8)
        patches = split_patches(fdm, 1)
        assert torch.equal(patches[0, 0, 0], fdm[0])

    def test_indivisible_rejected(self):
        with pytest.raises(ValueError, match="divisible"):
            split_patches(torch.randn(1, 2, 30, 30), 4)

    def test_non_square_rejected(self):
        with pytest.raises(ValueError, match="square"):
            split_patches(torch.randn(1, 2, 16, 32), 4)


class TestFrequencyBranch:
    def test_descriptor_shape(self):
        fb = FrequencyBranch(in_channels=32, width_multiplier=WIDTH).eval()
        with torch.no_grad():
            out = fb(torch.randn(6, 32, 8, 8))
        assert out.shape == (6, 32)  # c_df = 256 * 1/8

    def test_equal_patches_equal_descriptors(self):
        fb = FrequencyBranch(in_channels=4, width_multiplier=WIDTH).eval()
        patch = torch.full((1, 4, 8, 8), 0.37)
        with torch.no_grad():
            a = fb(patch)
            b = fb(patch.clone())
        assert torch.equal(a, b)

    def test_patch_side_divisibility_guard(self):
        fb = FrequencyBranch(in_channels=4, width_multiplier=WIDTH)
        with pytest.raises(ValueError, match="divisible by 8"):
            fb(torch.randn(1, 4, 6, 6))

    def test_wrong_patch_side_rejected(self):
        fb = FrequencyBranch(in_channels=4, width_multiplier=WIDTH, patch_side=8)
        with pytest.raises(ValueError, match="built for 8x8"):
            fb(torch.randn(1, 4, 16, 16))


class TestAssembleFreqMap:
    def test_grid_shape(self):
        desc = torch.randn(2, 4, 4, 32)
        out = assemble_freq_map(desc)
        assert out.shape == (2, 32, 4, 4)

    def test_permuting_cells_permutes_output(self):
        desc = torch.randn(1, 2, 2, 8)
        swapped = desc.clone()
        swapped[0, 0, 1], swapped[0, 1, 0] = desc[0, 1, 0], desc[0, 0, 1]
        a = assemble_freq_map(desc)
        b = assemble_freq_map(swapped)
        assert torch.equal(a[0, :, 0, 1], b[0, :, 1, 0])
        assert torch.equal(a[0, :, 0, 0], b[0, :, 0, 0])

    def test_zero_descriptors(self):
        assert torch.all(assemble_freq_map(torch.zeros(1, 4, 4, 8)) == 0)


class TestDiscriminate:
    @pytest.mark.parametrize("n", [2, 4, 8])
    def test_output_grid_matches_patch_count(self, n):
        d = make_disc(n=n).eval()
        with torch.no_grad():
            out = d(torch.rand(1, 3, 64 * n, 64 * n))
        assert out.shape == (1, n, n)
        assert torch.isfinite(out).all()

    def test_freq_branch_ablation(self):
        d = make_disc(n=2, use_freq=False).eval()
        assert d.freq is None
        with torch.no_grad():
            out = d(torch.rand(1, 3, 128, 128))
        assert out.shape == (1, 2, 2)

    def test_seeded_construction_reproducible(self):
        a, b = make_disc(seed=4), make_disc(seed=4)
        for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
            assert ka == kb and torch.equal(va, vb)

    def test_bad_n_rejected(self):
        with pytest.raises(ValueError, match="n must be"):
            DiscriminatorConfig(n=3)

    def test_gradient_matches_finite_differences(self):
        torch.manual_seed(0)
        d = make_disc(n=2).double().eval()
        x = torch.rand(1, 3, 128, 128, dtype=torch.float64)
        probe = torch.randn(1, 2, 2, dtype=torch.float64)

        def loss_fn():
            return ((d(x) - probe) ** 2).sum()

        err = max_rel_err_vs_fd(loss_fn, list(d.parameters()), n_probes=2)
        assert err < 1e-3


class TestSeparation:
    def test_d_alone_separates_patches_after_200_steps(self, manifest16):
        # against a fixed untrained generator, 200 discriminator-only updates
        # must score pasted-object cells well above background cells
        import numpy as np

        from dualharm import data
        from dualharm.generator import Generator, GeneratorConfig
        from dualharm.losses import d_loss
        from dualharm.trainer import batch_to_tensors, grid_targets

        samples = [data.load_record(manifest16, i, seed=0, image_size=128) for i in range(16)]
        comp, bg, mask = batch_to_tensors(samples)
        gen = Generator(GeneratorConfig(width_multiplier=WIDTH, seed=0)).eval()
        with torch.no_grad():
            harm, _ = gen(comp, bg, mask)  # generator never updates
        targets = grid_targets(mask, 2)

        disc = make_disc(n=2, seed=1).train()
        opt = torch.optim.Adam(disc.parameters(), lr=2e-4, betas=(0.5, 0.999))
        for step in range(200):
            idx = np.random.default_rng([11, step]).choice(16, size=4, replace=False)
            idx = torch.from_numpy(idx)
            loss = d_loss(
                disc(harm[idx]), disc(comp[idx]), disc(bg[idx]), targets[idx]
            )
            opt.zero_grad()
            loss.backward()
            opt.step()

        disc.eval()
        with torch.no_grad():
            pred = disc(comp)
        fg = pred[targets == 1].mean().item()
        bgp = pred[targets == 0].mean().item()
        assert fg - bgp > 0.2, f"fg {fg:.3f} vs bg {bgp:.3f}"
