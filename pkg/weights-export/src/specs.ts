/**
 * Backbone geometries and the tensor roles the consumer expects.
 *
 * The role layout must match the loader exactly: patch embedding kernel and
 * bias, spatial-only position embeddings, one learned embedding per special
 * token (class/register), and per-block pre-norm attention + MLP tensors.
 */

export interface BackboneSpec {
  depth: number;
  width: number;
  heads: number;
  patchSize: number;
  specialTokens: number;
  posGrid: number;
  mlpRatio: number;
  channels: number;
}

export type SourceFamily = "timm" | "openclip";

export interface ModelPreset {
  spec: BackboneSpec;
  family: SourceFamily;
  registers: number; // register tokens beyond the class token
}

function vit(depth: number, width: number, heads: number, patchSize: number,
             specialTokens: number, posGrid: number): BackboneSpec {
  return { depth, width, heads, patchSize, specialTokens, posGrid, mlpRatio: 4.0, channels: 3 };
}

export const PRESETS: Record<string, ModelPreset> = {
  dinov2_vitl14_reg: { spec: vit(24, 1024, 16, 14, 5, 16), family: "timm", registers: 4 },
  dino_vitb8: { spec: vit(12, 768, 12, 8, 1, 28), family: "timm", registers: 0 },
  openclip_vitl14: { spec: vit(24, 1024, 16, 14, 1, 16), family: "openclip", registers: 0 },
  openclip_vitb32: { spec: vit(12, 768, 12, 32, 1, 7), family: "openclip", registers: 0 },
  mae_vitl16: { spec: vit(24, 1024, 16, 16, 1, 14), family: "timm", registers: 0 },
  mae_vitb16: { spec: vit(12, 768, 12, 16, 1, 14), family: "timm", registers: 0 },
};

export function requiredLayout(spec: BackboneSpec): Map<string, number[]> {
  const w = spec.width;
  const hidden = Math.round(w * spec.mlpRatio);
  const layout = new Map<string, number[]>();
  layout.set("patch_embed.weight", [w, spec.channels, spec.patchSize, spec.patchSize]);
  layout.set("patch_embed.bias", [w]);
  layout.set("pos_embed", [spec.posGrid * spec.posGrid, w]);
  if (spec.specialTokens > 0) {
    layout.set("special_tokens", [spec.specialTokens, w]);
  }
  for (let i = 0; i < spec.depth; i++) {
    layout.set(`block.${i}.norm1.weight`, [w]);
    layout.set(`block.${i}.norm1.bias`, [w]);
    layout.set(`block.${i}.attn.qkv.weight`, [3 * w, w]);
    layout.set(`block.${i}.attn.qkv.bias`, [3 * w]);
    layout.set(`block.${i}.attn.proj.weight`, [w, w]);
    layout.set(`block.${i}.attn.proj.bias`, [w]);
    layout.set(`block.${i}.norm2.weight`, [w]);
    layout.set(`block.${i}.norm2.bias`, [w]);
    layout.set(`block.${i}.mlp.fc1.weight`, [hidden, w]);
    layout.set(`block.${i}.mlp.fc1.bias`, [hidden]);
    layout.set(`block.${i}.mlp.fc2.weight`, [w, hidden]);
    layout.set(`block.${i}.mlp.fc2.bias`, [w]);
  }
  return layout;
}
