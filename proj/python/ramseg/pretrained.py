"""Torch-backed DINOv2 backbone and SAM 2 engine.

Registered under "dinov2-vits14-reg" and "pretrained" when the checkpoint
environment variables point at existing files. torch, transformers and sam2
are imported only when a factory runs.
"""

import os

import numpy as np

from . import _core

DINO_ENV = "RAMSEG_DINO_CHECKPOINT"
SAM2_ENV = "RAMSEG_SAM2_CHECKPOINT"
SAM2_CONFIG_ENV = "RAMSEG_SAM2_CONFIG"
DEFAULT_SAM2_CONFIG = "configs/sam2.1/sam2.1_hiera_l.yaml"


def _resolve(explicit, env):
    for path in (explicit, os.environ.get(env, "")):
        if path and os.path.exists(path):
            return path
    return None


def _device():
    import torch

    return "cuda" if torch.cuda.is_available() else "cpu"


class DinoV2Backbone(_core.Backbone):
    """ViT-S/14 with registers; class token of the last layer (384-d)."""

    def __init__(self, checkpoint):
        super().__init__()
        import torch
        from transformers import AutoModel

        self._torch = torch
        self._device = _device()
        self._model = AutoModel.from_pretrained(checkpoint).to(self._device).eval()

    def dim(self):
        return int(self._model.config.hidden_size)

    def name(self):
        return "dinov2-vits14-reg"

    def input_resolution(self):
        return 0

    def forward(self, x):
        t = self._torch.from_numpy(np.ascontiguousarray(x.transpose(2, 0, 1)))[None].to(self._device)
        with self._torch.inference_mode():
            out = self._model(pixel_values=t).last_hidden_state[0, 0]
        return out.float().cpu().numpy()


class Sam2Engine(_core.Engine):
    """SAM 2 stages behind the engine contract.

    Every retrieved exemplar is treated as a conditioning frame, so the bank
    order does not matter.
    """

    def __init__(self, checkpoint, preprocess, config=None):
        super().__init__()
        import torch
        from sam2.build_sam import build_sam2

        self._torch = torch
        self._device = _device()
        self._preprocess = preprocess
        self._model = build_sam2(config or os.environ.get(SAM2_CONFIG_ENV, DEFAULT_SAM2_CONFIG), checkpoint,
                                 device=self._device).eval()
        self._side = int(self._model.image_size)
        self._positions = {}

    def name(self):
        return "pretrained"

    def memory_resolution(self):
        return self._side // 16

    def prepare_input(self, image):
        spec = dict(self._preprocess, seg_resolution=self._side)
        return _core.preprocess_for_segmentation(image, spec)

    def check_input(self, x):
        if x.shape != (self._side, self._side, 3):
            raise ValueError(f"SAM 2 expects a {self._side}x{self._side}x3 input, got {x.shape}")

    def _tensor(self, hwc):
        return self._torch.from_numpy(np.ascontiguousarray(hwc.transpose(2, 0, 1)))[None].to(self._device)

    @staticmethod
    def _numpy(nchw):
        return nchw[0].permute(1, 2, 0).float().cpu().numpy()

    def encode_image(self, x):
        torch = self._torch
        with torch.inference_mode():
            out = self._model.forward_image(self._tensor(x))
            _, feats, pos, sizes = self._model._prepare_backbone_features(out)
        grids = [f.permute(1, 2, 0).view(1, -1, h, w) for f, (h, w) in zip(feats, sizes)]
        self._positions[sizes[-1]] = pos[-1]
        return {"grid": self._numpy(grids[-1]), "stride": 16, "skips": [self._numpy(g) for g in grids[:-1]]}

    def _vision_feats(self, features):
        grids = [self._tensor(s) for s in features["skips"]] + [self._tensor(features["grid"])]
        feats = [g.flatten(2).permute(2, 0, 1) for g in grids]
        sizes = [tuple(g.shape[-2:]) for g in grids]
        return feats, sizes

    def encode_memory(self, features, mask):
        torch = self._torch
        feats, sizes = self._vision_feats(features)
        m = torch.from_numpy(mask.astype(np.float32))[None, None].to(self._device)
        m = torch.nn.functional.interpolate(m, size=(self._side, self._side), mode="nearest")
        logits = (m * 2.0 - 1.0) * 10.0
        with torch.inference_mode():
            score = torch.full((1, 1), 10.0 if mask.any() else -10.0, device=self._device)
            memory, _ = self._model._encode_new_memory(feats, sizes, logits, score, is_mask_from_pts=True)
        return self._numpy(memory)

    def memory_attention(self, query, memories):
        torch = self._torch
        model = self._model
        feats, sizes = self._vision_feats(query)
        h, w = sizes[-1]
        with torch.inference_mode():
            memory, memory_pos = [], []
            for entry in memories:
                mem = self._tensor(entry["memory"])
                pos = model.memory_encoder.position_encoding(mem).to(mem.dtype)
                memory.append(mem.flatten(2).permute(2, 0, 1))
                memory_pos.append(pos.flatten(2).permute(2, 0, 1) + model.maskmem_tpos_enc[model.num_maskmem - 1])
            conditioned = model.memory_attention(
                curr=feats[-1:],
                curr_pos=[self._positions[(h, w)]],
                memory=torch.cat(memory, dim=0),
                memory_pos=torch.cat(memory_pos, dim=0),
                num_obj_ptr_tokens=0,
            )
        grid = conditioned.permute(1, 2, 0).view(1, -1, h, w)
        return {"grid": self._numpy(grid), "stride": 16, "skips": query["skips"]}

    def decode(self, conditioned):
        torch = self._torch
        with torch.inference_mode():
            outputs = self._model._forward_sam_heads(
                backbone_features=self._tensor(conditioned["grid"]),
                high_res_features=[self._tensor(s) for s in conditioned["skips"]],
                multimask_output=False,
            )
        high_res = outputs[4]
        return high_res[0, 0].float().cpu().numpy()


def register_available():
    """Registers the torch-backed factories whose checkpoints are configured."""
    if _resolve("", DINO_ENV):
        _core.register_backbone("dinov2-vits14-reg",
                                lambda checkpoint: DinoV2Backbone(_resolve(checkpoint, DINO_ENV)))
    if _resolve("", SAM2_ENV):
        _core.register_engine("pretrained",
                              lambda checkpoint, preprocess: Sam2Engine(_resolve(checkpoint, SAM2_ENV), preprocess))
