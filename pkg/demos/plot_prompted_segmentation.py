"""
Segmenting with a click prompt
==============================

A click becomes a guidance query that rides through the decoder with the
base queries. Here the [SEG] hidden state comes from the mock endpoint, and
the mask head is planted with the clicked cell's feature, so cells that look
like it light up.
"""

import numpy as np

from ndtscene import PipelineConfig, PromptInput, init_params
from ndtscene.msdec import MockEndpoint, respond
from ndtscene.nn import autodiff as ad
from ndtscene.pipeline import segment_cloud, tokenize_cloud
from ndtscene.synthetic import synthetic_room

config = PipelineConfig(query_count=64, feature_dim=32, llm_dim=16)
params = init_params(config)
cloud = synthetic_room(8_000, seed=4)
click = PromptInput("point", point=(3.0, 2.5, 0.0))

###############################################################################
# Tokenize with the prompt: the bundle now carries a guidance token.

tok = tokenize_cloud(cloud, config, params, prompt=click)
print("guidance token:", tok.bundle.guidance_token is not None)

###############################################################################
# Ask the mock endpoint for a reply that contains [SEG].

endpoint = MockEndpoint(config.llm_dim, emit_seg=True, seed=config.seed)
reply, (hidden,) = respond(tok.bundle, [101, 102], endpoint, lambda h: h)
print("reply:", reply.text)

###############################################################################
# Random weights give an arbitrary mask. Replacing the mask head's last layer
# with a constant kernel (the clicked cell's centered feature) shows the
# decode path: the clicked cell scores highest and similar cells follow.

feats = tok.encoding.features[-1].values.data
target = int(np.argmin(np.linalg.norm(tok.encoding.multiscale.finest.means - click.point, axis=1)))
kernel = feats[target] - feats.mean(axis=0)
planted = params.with_updates({"heads.mask.fc2.weight": np.zeros((32, 32)),
                               "heads.mask.fc2.bias": kernel})
with ad.no_grad():
    seg = segment_cloud(cloud, config, planted, hidden, prompt=click)
print("cells on:", int(seg.segmentation.mask.sum()), "of", len(seg.segmentation.mask))
print("clicked cell is the top scorer:", int(np.argmax(seg.segmentation.logits.data)) == target)
print("points on:", int(seg.point_mask.sum()))
