"""Shared phantom computations for the phantom and acceptance tests."""

import dataclasses
import functools

import numpy as np

from poreval.cc import compare_images
from poreval.phantom import PhantomParams, PhantomSpec, degrade, generate_network, rasterize, render
from poreval.segment import BinarizeParams, binarize_pipeline, dice
from poreval.skelgraph import analyze_binary
from poreval.volume import ImageStack


def reference_mask(spec, shape):
    """Rasterize ``spec`` on the endpoint-anchored grid of a z-resampled volume."""
    p = spec.params
    nz = shape[0]
    sz = p.spacing[2] * (p.dims[2] - 1) / (nz - 1)
    p2 = dataclasses.replace(p, dims=(p.dims[0], p.dims[1], nz), spacing=(p.spacing[0], p.spacing[1], sz))
    s2 = PhantomSpec(p2, spec.seed, spec.tubules, spec.branches)
    tub, bra = rasterize(s2)
    return tub | bra


@functools.lru_cache(maxsize=None)
def full_pipeline_run(seed=0):
    """Default phantom, no blur or noise, default 3D binarization and graph."""
    spec = generate_network(PhantomParams(), seed)
    stack = render(spec, psf_fwhm_nm=None)
    bv = binarize_pipeline(stack, BinarizeParams())
    ref = reference_mask(spec, bv.bits.shape)
    graph, metrics = analyze_binary(bv.bits, bv.spacing, extend_boundary=True)
    return spec, dice(bv.bits, ref), graph, metrics


def mid_slice(stack):
    k = stack.voxels.shape[0] // 2
    return ImageStack(stack.voxels[k:k + 1], stack.spacing, stack.intensity_range)


@functools.lru_cache(maxsize=None)
def degradation_matching(seeds=tuple(range(10)), factors=(2, 4, 8)):
    """CC matching% of degraded vs clean renders on the middle slice, per seed."""
    bp = BinarizeParams(dim=2)
    out = {}
    for seed in seeds:
        clean = render(generate_network(PhantomParams(), seed))
        gt = binarize_pipeline(mid_slice(clean), bp).bits[0]
        out[seed] = [compare_images(binarize_pipeline(mid_slice(degrade(clean, f)), bp).bits[0], gt)["matching_pct"]
                     for f in factors]
    return out
