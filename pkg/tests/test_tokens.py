"""Flattening, modality concatenation, grouping and the fixed pixel shuffle."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hiperceiver.tokens import (ConfigError, TokenArray, concat_modalities, fixed_shuffle, flatten, merge_groups,
                                shuffle_permutation, split_groups)


class TestFlatten:
    def test_row_major(self):
        grid = np.array([[1, 2, 3], [4, 5, 6]], dtype=float)[..., None]
        x = flatten(grid)
        assert x.tokens[:, 0].tolist() == [1, 2, 3, 4, 5, 6]
        assert x.source_shapes == [(2, 3)]

    def test_image_token_count(self):
        x = flatten(np.zeros((224, 224, 3)))
        assert (x.num_tokens, x.channels) == (50_176, 3)

    def test_groups_hold_consecutive_rows(self):
        x = flatten(np.arange(16, dtype=float).reshape(4, 4, 1))
        g = split_groups(x, 2)
        assert g.groups[0, :, 0].tolist() == list(range(8))

    def test_empty_signal(self):
        with pytest.raises(ValueError):
            flatten(np.zeros((0, 3)))

    def test_needs_channel_axis(self):
        with pytest.raises(ValueError):
            flatten(np.zeros(5))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 6), st.integers(2, 7))
    def test_row_neighbours_stay_adjacent(self, h, w):
        grid = np.arange(h * w, dtype=float).reshape(h, w, 1)
        x = flatten(grid).tokens[:, 0]
        for r in range(h):
            for c in range(w - 1):
                i = int(np.flatnonzero(x == grid[r, c, 0])[0])
                assert x[i + 1] == grid[r, c + 1, 0]


class TestConcat:
    def test_single_part_identity(self):
        a = flatten(np.ones((3, 2)))
        out = concat_modalities([a])
        assert np.array_equal(out.tokens, a.tokens)
        assert out.modality_segments == a.modality_segments

    def test_segments(self):
        out = concat_modalities([flatten(np.zeros((3, 4, 1))), flatten(np.zeros((4, 1)), 1)])
        assert out.num_tokens == 16
        assert out.modality_segments == [(0, 0, 12), (1, 12, 4)]
        assert out.modality_ids().tolist() == [0] * 12 + [1] * 4

    def test_colliding_ids_renumbered(self):
        out = concat_modalities([flatten(np.zeros((2, 1))), flatten(np.zeros((3, 1)))])
        assert [s[0] for s in out.modality_segments] == [0, 1]

    def test_audio_video_length(self):
        assert 401_408 + 122_880 == 524_288
        video, audio = TokenArray(np.zeros((401_408, 1))), TokenArray(np.zeros((122_880, 1)))
        assert concat_modalities([video, audio]).num_tokens == 524_288

    def test_channel_mismatch(self):
        with pytest.raises(ValueError, match="channel mismatch"):
            concat_modalities([flatten(np.zeros((2, 1))), flatten(np.zeros((2, 3)))])

    def test_segments_must_tile(self):
        with pytest.raises(ValueError):
            TokenArray(np.zeros((4, 1)), [(0, 0, 2), (1, 3, 1)])


class TestGrouping:
    def test_three_groups_of_two(self):
        g = split_groups(np.arange(6.0)[:, None], 3)
        assert g.groups.shape == (3, 2, 1)
        assert g.offsets.tolist() == [0, 2, 4]

    def test_fourteen_rows_per_group(self):
        g = split_groups(np.zeros((50_176, 1)), 16)
        assert g.group_size == 3_136 == 14 * 224

    def test_non_divisible(self):
        with pytest.raises(ConfigError):
            split_groups(np.zeros((5, 1)), 2)

    def test_merge_shape(self):
        out = merge_groups(np.zeros((16, 128, 128)))
        assert out.tokens.shape == (2048, 128)

    def test_merge_single_group(self, rng):
        y = rng.standard_normal((1, 4, 3))
        assert np.array_equal(merge_groups(y).tokens, y[0])

    def test_ragged(self):
        with pytest.raises(ValueError, match="ragged"):
            merge_groups([np.zeros((2, 3)), np.zeros((3, 3))])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 6), st.integers(1, 3), st.integers(0, 2**16))
    def test_split_merge_roundtrip(self, g, size, c, seed):
        x = np.random.default_rng(seed).standard_normal((g * size, c))
        back = merge_groups(split_groups(x, g).groups, g).tokens
        assert back.tobytes() == x.tobytes()


class TestShuffle:
    def test_deterministic(self):
        assert np.array_equal(shuffle_permutation(100, 7)[0], shuffle_permutation(100, 7)[0])

    def test_inverse(self, rng):
        x = flatten(rng.standard_normal((8, 8, 2)))
        perm, inv = shuffle_permutation(64, 3)
        y = fixed_shuffle(x, 3)
        assert np.array_equal(y.tokens[inv], x.tokens)
        assert np.array_equal(y.tokens, x.tokens[perm])

    def test_adjacency_destruction_monte_carlo(self):
        m = 1024
        kept = []
        for seed in range(1000):
            _, inv = shuffle_permutation(m, seed)
            kept.append(np.mean(np.abs(np.diff(inv)) == 1))
        frac = float(np.mean(kept))
        assert 0.5 * 2 / m <= frac <= 1.5 * 2 / m
