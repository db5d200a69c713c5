"""Language-conditioned segmentation network.

The architecture fuses a frozen-capable image encoder with a joint
image-text prompt encoder through two lightweight adapters: per-token
sparse embeddings and a single global dense embedding derived from the
end-of-sequence state. A two-way cross-attention decoder grounds the
adapted prompt into per-pixel foreground probabilities.

Two instantiations share this code path: a tiny randomly-initialized scale
that trains on CPU in minutes, and a "full" scale that enforces the frozen
backbone contract (image encoder and prompt-encoder base weights receive no
gradients; only low-rank deltas, adapters, and the decoder train).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..backends import image_key
from ..maskops import resize_longest_side

PAD_ID = 256
EOS_ID = 257
VOCAB_SIZE = 258


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    image_size: int = 256
    patch_stride: int = 16
    d_img: int = 32
    d_dec: int = 32
    d_t: int = 48
    decoder_blocks: int = 2
    decoder_heads: int = 4
    prompt_layers: int = 2
    prompt_heads: int = 4
    lora_rank: int = 16
    lora_alpha: float = 32.0
    scale: str = "tiny"
    text_only: bool = False
    token_positions: bool = False
    max_text_len: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.image_size % self.patch_stride != 0:
            raise ModelError("image_size must be divisible by patch_stride")
        if self.d_dec % self.decoder_heads != 0:
            raise ModelError("d_dec must be divisible by decoder_heads")
        if self.patch_stride % 4 != 0:
            raise ModelError("patch_stride must be a multiple of 4 (two 2x upsampling stages)")
        if self.scale not in ("tiny", "full"):
            raise ModelError(f"unknown scale {self.scale!r}")

    @property
    def grid_side(self) -> int:
        return self.image_size // self.patch_stride

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        return cls(**obj)


@dataclass
class ImageEmbedding:
    """Spatial image embedding, (d_img, H', W') with H' = W' = grid_side."""

    grid: torch.Tensor


@dataclass
class PromptEncoding:
    """Final-layer states at text-token positions plus the EOS state."""

    text_states: torch.Tensor  # (T, d_t)
    eos_state: torch.Tensor  # (d_t,)

    @property
    def text_token_count(self) -> int:
        return int(self.text_states.shape[0])


@dataclass
class AdaptedPrompt:
    sparse: torch.Tensor  # (T, d_dec)
    dense: torch.Tensor  # (d_dec,) — broadcast over the grid inside the decoder


@dataclass
class MaskPrediction:
    probabilities: np.ndarray  # (H, W) in [0, 1]
    logits: np.ndarray  # (H, W)


def tokenize(text: str, max_len: int) -> list[int]:
    """Byte-level ids with an explicit EOS; over-long prompts are an error."""
    if not text:
        raise ModelError("empty prompt text")
    ids = list(text.encode("utf-8"))
    if len(ids) > max_len - 1:
        raise ModelError(f"prompt is {len(ids)} tokens; the encoder context window allows {max_len - 1}")
    return ids + [EOS_ID]


def preprocess_image(image: np.ndarray, image_size: int) -> tuple[torch.Tensor, tuple[int, int], tuple[int, int]]:
    """Resize so the longer side is image_size, zero-pad bottom/right to a
    square, and normalize to [-1, 1]. Returns (tensor CHW, original (H, W),
    resized (H, W) before padding)."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ModelError(f"expected (H, W, 3) image, got {image.shape}")
    orig = image.shape[:2]
    resized = resize_longest_side(image, image_size)
    rh, rw = resized.shape[:2]
    canvas = np.zeros((image_size, image_size, 3), dtype=np.uint8)
    canvas[:rh, :rw] = resized
    tensor = torch.from_numpy(canvas.astype(np.float32) / 127.5 - 1.0).permute(2, 0, 1)
    return tensor, orig, (rh, rw)


def postprocess_prediction(
    logits: torch.Tensor, original: tuple[int, int], resized: tuple[int, int]
) -> MaskPrediction:
    """Undo the padding, then resize logits back to the original dimensions."""
    rh, rw = resized
    cropped = logits[:rh, :rw]
    restored = F.interpolate(
        cropped[None, None], size=original, mode="bilinear", align_corners=False
    )[0, 0]
    restored_np = restored.detach().cpu().numpy().astype(np.float32)
    probs = 1.0 / (1.0 + np.exp(-restored_np))
    return MaskPrediction(probabilities=probs, logits=restored_np)


class LoRALinear(nn.Module):
    """Linear layer with a low-rank trainable delta: y = xW^T + b + (a/r)(xA^T)B^T.

    At full scale the base weight and bias are frozen and only A/B train.
    """

    def __init__(self, in_features: int, out_features: int, rank: int, alpha: float):
        super().__init__()
        self.base = nn.Linear(in_features, out_features)
        self.rank = rank
        self.scaling = alpha / rank if rank > 0 else 0.0
        if rank > 0:
            self.lora_a = nn.Parameter(torch.randn(rank, in_features) * 0.02)
            self.lora_b = nn.Parameter(torch.zeros(out_features, rank))
        else:
            self.register_parameter("lora_a", None)
            self.register_parameter("lora_b", None)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.base(x)
        if self.rank > 0:
            out = out + self.scaling * F.linear(F.linear(x, self.lora_a), self.lora_b)
        return out


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int, linear_cls=nn.Linear, **linear_kw):
        super().__init__()
        if dim % heads != 0:
            raise ModelError("dim must divide heads")
        self.heads = heads
        self.head_dim = dim // heads
        self.q = linear_cls(dim, dim, **linear_kw)
        self.k = linear_cls(dim, dim, **linear_kw)
        self.v = linear_cls(dim, dim, **linear_kw)
        self.out = linear_cls(dim, dim, **linear_kw)

    def forward(self, queries, keys, values, key_padding_mask=None):
        # queries: (B, Nq, D); keys/values: (B, Nk, D)
        b, nq, _ = queries.shape
        nk = keys.shape[1]
        q = self.q(queries).view(b, nq, self.heads, self.head_dim).transpose(1, 2)
        k = self.k(keys).view(b, nk, self.heads, self.head_dim).transpose(1, 2)
        v = self.v(values).view(b, nk, self.heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if key_padding_mask is not None:
            scores = scores.masked_fill(key_padding_mask[:, None, None, :], float("-inf"))
        attn = scores.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, nq, -1)
        return self.out(out)


class LoraBlock(nn.Module):
    """Pre-norm transformer encoder block built from LoRA-capable linears."""

    def __init__(self, dim: int, heads: int, rank: int, alpha: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads, linear_cls=LoRALinear, rank=rank, alpha=alpha)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            LoRALinear(dim, dim * 4, rank, alpha), nn.GELU(), LoRALinear(dim * 4, dim, rank, alpha)
        )

    def forward(self, x, key_padding_mask=None):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, key_padding_mask=key_padding_mask)
        x = x + self.mlp(self.norm2(x))
        return x


def _sincos_2d(side: int, dim: int) -> torch.Tensor:
    """Fixed 2-D sine-cosine position table, (side*side, dim)."""
    if dim % 4 != 0:
        raise ModelError("positional dim must be a multiple of 4")
    quarter = dim // 4
    omega = 1.0 / (10000 ** (torch.arange(quarter, dtype=torch.float64) / quarter))
    coords = torch.arange(side, dtype=torch.float64)
    ys, xs = torch.meshgrid(coords, coords, indexing="ij")
    out = []
    for pos in (ys.reshape(-1), xs.reshape(-1)):
        angles = pos[:, None] * omega[None, :]
        out.extend([angles.sin(), angles.cos()])
    return torch.cat(out, dim=1).float()


class ImageEncoder(nn.Module):
    """Prompt-independent spatial feature extractor; frozen at full scale."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.patch = nn.Conv2d(3, cfg.d_img, kernel_size=cfg.patch_stride, stride=cfg.patch_stride)
        self.mix = nn.Conv2d(cfg.d_img, cfg.d_img, kernel_size=3, padding=1)
        self.norm = nn.LayerNorm(cfg.d_img)
        self.calls = 0

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        # (B, 3, S, S) -> (B, d_img, S/stride, S/stride)
        self.calls += 1
        x = self.patch(image)
        x = x + self.mix(F.gelu(x))
        x = self.norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)
        return x


class PromptEncoder(nn.Module):
    """Joint image-text encoder; returns states at text positions only.

    The backbone linears are LoRA-wrapped: at full scale the base weights
    freeze and only the low-rank deltas receive gradients.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.token_embed = nn.Embedding(VOCAB_SIZE, cfg.d_t)
        self.text_pos = nn.Parameter(torch.randn(cfg.max_text_len + 1, cfg.d_t) * 0.02)
        self.patch = nn.Conv2d(3, cfg.d_t, kernel_size=cfg.patch_stride, stride=cfg.patch_stride)
        self.register_buffer("patch_pos", _sincos_2d(cfg.grid_side, cfg.d_t), persistent=False)
        self.blocks = nn.ModuleList(
            LoraBlock(cfg.d_t, cfg.prompt_heads, cfg.lora_rank, cfg.lora_alpha) for _ in range(cfg.prompt_layers)
        )
        self.final_norm = nn.LayerNorm(cfg.d_t)

    def forward(
        self, image: torch.Tensor, token_ids: torch.Tensor, token_mask: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """image (B,3,S,S); token_ids (B,L) padded with PAD_ID; token_mask
        (B,L) True at real token positions (EOS included).

        Returns (states (B,L,d_t) at token positions, eos_state (B,d_t)).
        """
        b, length = token_ids.shape
        text = self.token_embed(token_ids) + self.text_pos[:length][None]
        if self.cfg.text_only:
            seq = text
            pad_mask = ~token_mask
            text_offset = 0
        else:
            patches = self.patch(image).flatten(2).transpose(1, 2)  # (B, P, d_t)
            patches = patches + self.patch_pos[None].to(patches.dtype)
            seq = torch.cat([patches, text], dim=1)
            pad_mask = torch.cat(
                [torch.zeros(b, patches.shape[1], dtype=torch.bool, device=image.device), ~token_mask], dim=1
            )
            text_offset = patches.shape[1]
        for block in self.blocks:
            seq = block(seq, key_padding_mask=pad_mask)
        seq = self.final_norm(seq)
        states = seq[:, text_offset : text_offset + length]
        eos_index = token_mask.sum(dim=1) - 1  # EOS is the last real token
        eos_state = states[torch.arange(b, device=states.device), eos_index]
        return states, eos_state


class PromptAdapter(nn.Module):
    """Sparse: layer-normalized linear projection of text states. Dense:
    2-layer SiLU MLP on the EOS state."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.sparse_norm = nn.LayerNorm(cfg.d_t)
        self.sparse_proj = nn.Linear(cfg.d_t, cfg.d_dec)
        self.dense_mlp = nn.Sequential(nn.Linear(cfg.d_t, cfg.d_dec), nn.SiLU(), nn.Linear(cfg.d_dec, cfg.d_dec))

    def forward(self, states: torch.Tensor, eos_state: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.sparse_proj(self.sparse_norm(states)), self.dense_mlp(eos_state)


class TwoWayBlock(nn.Module):
    """Bidirectional cross-attention between prompt tokens and the image grid."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.self_attn = Attention(dim, heads)
        self.norm1 = nn.LayerNorm(dim)
        self.cross_token_to_image = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim * 4), nn.GELU(), nn.Linear(dim * 4, dim))
        self.norm3 = nn.LayerNorm(dim)
        self.cross_image_to_token = Attention(dim, heads)
        self.norm4 = nn.LayerNorm(dim)

    def forward(self, tokens, image, image_pos, token_mask=None):
        tokens = self.norm1(tokens + self.self_attn(tokens, tokens, tokens, key_padding_mask=token_mask))
        tokens = self.norm2(
            tokens + self.cross_token_to_image(tokens, image + image_pos, image)
        )
        tokens = self.norm3(tokens + self.mlp(tokens))
        image = self.norm4(
            image + self.cross_image_to_token(image + image_pos, tokens, tokens, key_padding_mask=token_mask)
        )
        return tokens, image


class MaskDecoder(nn.Module):
    """Two-way transformer over (output token + sparse tokens) and the image
    grid, followed by two 2x transposed-convolution stages, bilinear
    upsampling to full resolution, and a per-pixel dot product with the MLP
    image of the output token. Produces a single mask."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.neck = nn.Conv2d(cfg.d_img, cfg.d_dec, kernel_size=1)
        self.register_buffer("grid_pos", _sincos_2d(cfg.grid_side, cfg.d_dec), persistent=False)
        self.output_token = nn.Parameter(torch.randn(cfg.d_dec) * 0.02)
        if cfg.token_positions:
            self.token_pos = nn.Parameter(torch.randn(cfg.max_text_len + 1, cfg.d_dec) * 0.02)
        else:
            self.token_pos = None
        self.blocks = nn.ModuleList(TwoWayBlock(cfg.d_dec, cfg.decoder_heads) for _ in range(cfg.decoder_blocks))
        up_mid = max(cfg.d_dec // 2, 4)
        up_out = max(cfg.d_dec // 4, 4)
        self.up1 = nn.ConvTranspose2d(cfg.d_dec, up_mid, kernel_size=2, stride=2)
        self.up2 = nn.ConvTranspose2d(up_mid, up_out, kernel_size=2, stride=2)
        self.hyper = nn.Sequential(nn.Linear(cfg.d_dec, cfg.d_dec), nn.SiLU(), nn.Linear(cfg.d_dec, up_out))
        self.logit_bias = nn.Parameter(torch.zeros(1))

    def forward(
        self,
        image_grid: torch.Tensor,  # (B, d_img, G, G)
        sparse: torch.Tensor,  # (B, T, d_dec)
        dense: torch.Tensor,  # (B, d_dec)
        sparse_mask: torch.Tensor | None = None,  # (B, T) True at padding
    ) -> torch.Tensor:
        b = image_grid.shape[0]
        grid = self.neck(image_grid)
        grid = grid + dense[:, :, None, None]  # dense prompt broadcast over the grid
        g = grid.shape[-1]
        image_seq = grid.flatten(2).transpose(1, 2)  # (B, G*G, d_dec)
        image_pos = self.grid_pos[None].to(image_seq.dtype)

        if self.token_pos is not None:
            sparse = sparse + self.token_pos[: sparse.shape[1]][None]
        tokens = torch.cat([self.output_token[None, None].expand(b, 1, -1), sparse], dim=1)
        token_mask = None
        if sparse_mask is not None:
            token_mask = torch.cat(
                [torch.zeros(b, 1, dtype=torch.bool, device=sparse.device), sparse_mask], dim=1
            )
        for block in self.blocks:
            tokens, image_seq = block(tokens, image_seq, image_pos, token_mask=token_mask)

        feats = image_seq.transpose(1, 2).reshape(b, -1, g, g)
        feats = F.gelu(self.up1(feats))
        feats = F.gelu(self.up2(feats))
        feats = F.interpolate(
            feats, size=(self.cfg.image_size, self.cfg.image_size), mode="bilinear", align_corners=False
        )
        weights = self.hyper(tokens[:, 0])  # the first output token makes the mask
        logits = torch.einsum("bchw,bc->bhw", feats, weights) + self.logit_bias
        return logits


class EmbeddingCache:
    """Keyed store of image embeddings so the image is encoded once per
    unique image regardless of how many prompts query it."""

    def __init__(self):
        self._store: dict[str, torch.Tensor] = {}

    def get(self, key: str) -> torch.Tensor | None:
        return self._store.get(key)

    def put(self, key: str, grid: torch.Tensor) -> None:
        self._store[key] = grid.detach()


class SegmentationModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.image_encoder = ImageEncoder(cfg)
        self.prompt_encoder = PromptEncoder(cfg)
        self.adapter = PromptAdapter(cfg)
        self.decoder = MaskDecoder(cfg)
        if cfg.scale == "full":
            self.apply_freeze_policy()

    def apply_freeze_policy(self) -> None:
        """Full-scale contract: image encoder fully frozen; prompt-encoder
        base weights frozen with only LoRA deltas trainable."""
        for p in self.image_encoder.parameters():
            p.requires_grad_(False)
        for name, p in self.prompt_encoder.named_parameters():
            p.requires_grad_("lora_a" in name or "lora_b" in name)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    # -- staged operations ---------------------------------------------------

    def encode_image(self, image: torch.Tensor) -> ImageEmbedding:
        if image.dim() == 3:
            image = image[None]
        if image.shape[-1] != self.cfg.image_size or image.shape[-2] != self.cfg.image_size:
            raise ModelError(f"image must be preprocessed to {self.cfg.image_size}^2, got {tuple(image.shape)}")
        return ImageEmbedding(grid=self.image_encoder(image))

    def encode_prompt(self, image: torch.Tensor, text: str) -> PromptEncoding:
        if image.dim() == 3:
            image = image[None]
        ids = tokenize(text, self.cfg.max_text_len)
        token_ids = torch.tensor([ids], dtype=torch.long, device=image.device)
        mask = torch.ones_like(token_ids, dtype=torch.bool)
        states, eos = self.prompt_encoder(image, token_ids, mask)
        # text positions exclude the end marker; its state is the global one
        return PromptEncoding(text_states=states[0, : len(ids) - 1], eos_state=eos[0])

    def adapt_prompt(self, enc: PromptEncoding) -> AdaptedPrompt:
        sparse, dense = self.adapter(enc.text_states[None], enc.eos_state[None])
        return AdaptedPrompt(sparse=sparse[0], dense=dense[0])

    def decode_mask(self, img: ImageEmbedding, prompt: AdaptedPrompt) -> torch.Tensor:
        return self.decoder(img.grid, prompt.sparse[None], prompt.dense[None])[0]

    def forward_batch(
        self, images: torch.Tensor, token_ids: torch.Tensor, token_mask: torch.Tensor
    ) -> torch.Tensor:
        """Training path: (B,3,S,S) + padded tokens -> logits (B,S,S)."""
        grid = self.image_encoder(images)
        states, eos = self.prompt_encoder(images, token_ids, token_mask)
        sparse, dense = self.adapter(states, eos)
        text_mask = token_mask.clone()
        eos_index = token_mask.sum(dim=1) - 1
        text_mask[torch.arange(token_ids.shape[0], device=token_ids.device), eos_index] = False
        return self.decoder(grid, sparse, dense, sparse_mask=~text_mask)

    @torch.no_grad()
    def predict(self, image: np.ndarray, text: str, cache: EmbeddingCache | None = None) -> MaskPrediction:
        """Full path on a raw image: preprocess, forward, undo padding and
        resizing so the prediction matches the original dimensions."""
        tensor, original, resized = preprocess_image(image, self.cfg.image_size)
        device = next(self.parameters()).device
        dtype = next(self.parameters()).dtype
        tensor = tensor.to(device=device, dtype=dtype)[None]
        key = image_key(image)
        grid = cache.get(key) if cache is not None else None
        if grid is None:
            grid = self.image_encoder(tensor)
            if cache is not None:
                cache.put(key, grid)
        ids = tokenize(text, self.cfg.max_text_len)
        token_ids = torch.tensor([ids], dtype=torch.long, device=device)
        mask = torch.ones_like(token_ids, dtype=torch.bool)
        states, eos = self.prompt_encoder(tensor, token_ids, mask)
        sparse, dense = self.adapter(states[:, : len(ids) - 1], eos)
        logits = self.decoder(grid, sparse, dense)[0]
        return postprocess_prediction(logits, original, resized)


def build_model(cfg: ModelConfig) -> SegmentationModel:
    """Construct with deterministic initialization from cfg.seed."""
    generator_state = torch.get_rng_state()
    torch.manual_seed(cfg.seed)
    try:
        model = SegmentationModel(cfg)
    finally:
        torch.set_rng_state(generator_state)
    return model


def batch_tokenize(texts: list[str], max_len: int, device=None) -> tuple[torch.Tensor, torch.Tensor]:
    """Pad a batch of prompts to a common length; mask marks real tokens."""
    seqs = [tokenize(t, max_len) for t in texts]
    longest = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), longest), PAD_ID, dtype=torch.long, device=device)
    mask = torch.zeros((len(seqs), longest), dtype=torch.bool, device=device)
    for i, seq in enumerate(seqs):
        ids[i, : len(seq)] = torch.tensor(seq, dtype=torch.long)
        mask[i, : len(seq)] = True
    return ids, mask
