/**
 * One-shot conversion of upstream pretrained ViT checkpoints into the
 * tensor-archive + role-manifest pair the anomaly-detection pipeline loads.
 *
 * Two source naming families are handled:
 *   timm      - DINO / DINOv2 / Masked-AE releases: cls_token, pos_embed,
 *               patch_embed.proj.*, blocks.{i}.{norm1,attn.qkv,attn.proj,
 *               norm2,mlp.fc1,mlp.fc2}.*  (+ register_tokens for DINOv2-reg)
 *   openclip  - vision towers: visual.class_embedding,
 *               visual.positional_embedding, visual.conv1.weight,
 *               visual.transformer.resblocks.{i}.{ln_1,attn.in_proj,
 *               attn.out_proj,ln_2,mlp.c_fc,mlp.c_proj}.*
 *
 * Untouched tensors are byte-copied (dtype preserved, checksums stable).
 * The class token has its position embedding folded in, since both are
 * added once at the input; spatial position rows are sliced out verbatim.
 * Tensors the consumer does not model (final norm, layerscale gammas,
 * projection heads, decoder halves) are ignored. Source tensors that are
 * missing or mis-shaped abort the export naming the offender.
 */

import * as fs from "fs";
import * as path from "path";

import {
  Dtype,
  TensorEntry,
  TensorMap,
  dtypeSize,
  f32Entry,
  numElements,
  readArchive,
  toFloat32,
  writeArchive,
} from "./archive";
import { fnv1a64Hex } from "./fnv";
import { BackboneSpec, ModelPreset, PRESETS, SourceFamily, requiredLayout } from "./specs";

export const TOOL_VERSION = "0.1.0";
export const MANIFEST_FORMAT_VERSION = 1;

export interface ManifestRole {
  tensor: string;
  dtype: Dtype;
  shape: number[];
  fnv1a64: string;
}

export interface ExportManifest {
  source: string;
  format_version: number;
  tool_version: string;
  roles: Record<string, ManifestRole>;
}

class SourceReader {
  constructor(private tensors: TensorMap, private label: string) {}

  get(name: string, shape?: number[]): TensorEntry {
    const entry = this.tensors.get(name);
    if (!entry) {
      throw new Error(`${this.label}: missing source tensor '${name}'`);
    }
    if (shape && !sameShape(entry.shape, shape)) {
      throw new Error(
        `${this.label}: tensor '${name}' has shape [${entry.shape}], expected [${shape}]`
      );
    }
    return entry;
  }

  has(name: string): boolean {
    return this.tensors.has(name);
  }
}

function sameShape(a: number[], b: number[]): boolean {
  return a.length === b.length && a.every((v, i) => v === b[i]);
}

/** Byte-exact copy with a new shape of equal element count. */
function reshaped(entry: TensorEntry, shape: number[]): TensorEntry {
  if (numElements(entry.shape) !== numElements(shape)) {
    throw new Error(`cannot reshape [${entry.shape}] to [${shape}]`);
  }
  return { dtype: entry.dtype, shape, data: entry.data };
}

/** Byte-exact row slice of a [rows, width] view of the tensor. */
function sliceRows(entry: TensorEntry, width: number, from: number, to: number): TensorEntry {
  const rowBytes = width * dtypeSize(entry.dtype);
  return {
    dtype: entry.dtype,
    shape: [to - from, width],
    data: entry.data.subarray(from * rowBytes, to * rowBytes),
  };
}

function addF32(a: Float32Array, b: Float32Array): Float32Array {
  const out = new Float32Array(a.length);
  for (let i = 0; i < a.length; i++) {
    out[i] = a[i] + b[i];
  }
  return out;
}

function specialTokens(
  spec: BackboneSpec,
  registers: number,
  cls: TensorEntry,
  posRow0: TensorEntry,
  regs: TensorEntry | null
): TensorEntry {
  const w = spec.width;
  const rows: Float32Array[] = [addF32(toFloat32(reshaped(cls, [w])), toFloat32(posRow0))];
  if (registers > 0) {
    if (!regs) {
      throw new Error("register tokens expected but not found");
    }
    const flat = toFloat32(reshaped(regs, [registers, w]));
    for (let r = 0; r < registers; r++) {
      rows.push(flat.subarray(r * w, (r + 1) * w) as Float32Array);
    }
  }
  const values = new Float32Array(rows.length * w);
  rows.forEach((row, i) => values.set(row, i * w));
  return f32Entry([rows.length, w], values);
}

function mapTimm(src: SourceReader, spec: BackboneSpec, registers: number): TensorMap {
  const w = spec.width;
  const g2 = spec.posGrid * spec.posGrid;
  const out: TensorMap = new Map();
  out.set(
    "patch_embed.weight",
    reshaped(src.get("patch_embed.proj.weight", [w, spec.channels, spec.patchSize, spec.patchSize]),
             [w, spec.channels, spec.patchSize, spec.patchSize])
  );
  out.set("patch_embed.bias", reshaped(src.get("patch_embed.proj.bias", [w]), [w]));
  const pos = src.get("pos_embed", [1, 1 + g2, w]);
  out.set("pos_embed", sliceRows(reshaped(pos, [1 + g2, w]), w, 1, 1 + g2));
  out.set(
    "special_tokens",
    specialTokens(
      spec,
      registers,
      src.get("cls_token", [1, 1, w]),
      sliceRows(reshaped(pos, [1 + g2, w]), w, 0, 1),
      registers > 0 ? src.get("register_tokens", [1, registers, w]) : null
    )
  );
  const hidden = Math.round(w * spec.mlpRatio);
  for (let i = 0; i < spec.depth; i++) {
    const b = `blocks.${i}.`;
    const o = `block.${i}.`;
    out.set(o + "norm1.weight", src.get(b + "norm1.weight", [w]));
    out.set(o + "norm1.bias", src.get(b + "norm1.bias", [w]));
    out.set(o + "attn.qkv.weight", src.get(b + "attn.qkv.weight", [3 * w, w]));
    out.set(o + "attn.qkv.bias", src.get(b + "attn.qkv.bias", [3 * w]));
    out.set(o + "attn.proj.weight", src.get(b + "attn.proj.weight", [w, w]));
    out.set(o + "attn.proj.bias", src.get(b + "attn.proj.bias", [w]));
    out.set(o + "norm2.weight", src.get(b + "norm2.weight", [w]));
    out.set(o + "norm2.bias", src.get(b + "norm2.bias", [w]));
    out.set(o + "mlp.fc1.weight", src.get(b + "mlp.fc1.weight", [hidden, w]));
    out.set(o + "mlp.fc1.bias", src.get(b + "mlp.fc1.bias", [hidden]));
    out.set(o + "mlp.fc2.weight", src.get(b + "mlp.fc2.weight", [w, hidden]));
    out.set(o + "mlp.fc2.bias", src.get(b + "mlp.fc2.bias", [w]));
  }
  return out;
}

function mapOpenClip(src: SourceReader, spec: BackboneSpec): TensorMap {
  const w = spec.width;
  const g2 = spec.posGrid * spec.posGrid;
  const out: TensorMap = new Map();
  out.set(
    "patch_embed.weight",
    src.get("visual.conv1.weight", [w, spec.channels, spec.patchSize, spec.patchSize])
  );
  // the OpenCLIP stem convolution is bias-free; synthesize an exact zero bias
  out.set("patch_embed.bias", f32Entry([w], new Float32Array(w)));
  const pos = src.get("visual.positional_embedding", [1 + g2, w]);
  out.set("pos_embed", sliceRows(pos, w, 1, 1 + g2));
  const cls = src.get("visual.class_embedding", [w]);
  out.set("special_tokens", specialTokens(spec, 0, reshaped(cls, [1, 1, w]), sliceRows(pos, w, 0, 1), null));
  const hidden = Math.round(w * spec.mlpRatio);
  for (let i = 0; i < spec.depth; i++) {
    const b = `visual.transformer.resblocks.${i}.`;
    const o = `block.${i}.`;
    out.set(o + "norm1.weight", src.get(b + "ln_1.weight", [w]));
    out.set(o + "norm1.bias", src.get(b + "ln_1.bias", [w]));
    out.set(o + "attn.qkv.weight", src.get(b + "attn.in_proj_weight", [3 * w, w]));
    out.set(o + "attn.qkv.bias", src.get(b + "attn.in_proj_bias", [3 * w]));
    out.set(o + "attn.proj.weight", src.get(b + "attn.out_proj.weight", [w, w]));
    out.set(o + "attn.proj.bias", src.get(b + "attn.out_proj.bias", [w]));
    out.set(o + "norm2.weight", src.get(b + "ln_2.weight", [w]));
    out.set(o + "norm2.bias", src.get(b + "ln_2.bias", [w]));
    out.set(o + "mlp.fc1.weight", src.get(b + "mlp.c_fc.weight", [hidden, w]));
    out.set(o + "mlp.fc1.bias", src.get(b + "mlp.c_fc.bias", [hidden]));
    out.set(o + "mlp.fc2.weight", src.get(b + "mlp.c_proj.weight", [w, hidden]));
    out.set(o + "mlp.fc2.bias", src.get(b + "mlp.c_proj.bias", [w]));
  }
  return out;
}

export function convertCheckpoint(
  sourceTensors: TensorMap,
  modelId: string,
  preset: ModelPreset
): { tensors: TensorMap; manifest: ExportManifest } {
  const src = new SourceReader(sourceTensors, modelId);
  const tensors =
    preset.family === "openclip"
      ? mapOpenClip(src, preset.spec)
      : mapTimm(src, preset.spec, preset.registers);

  // every role the loader requires must be present exactly once
  const roles: Record<string, ManifestRole> = {};
  for (const [role, shape] of requiredLayout(preset.spec)) {
    const entry = tensors.get(role);
    if (!entry) {
      throw new Error(`${modelId}: conversion produced no tensor for role '${role}'`);
    }
    if (!sameShape(entry.shape, shape)) {
      throw new Error(
        `${modelId}: role '${role}' has shape [${entry.shape}], expected [${shape}]`
      );
    }
    roles[role] = {
      tensor: role,
      dtype: entry.dtype,
      shape: entry.shape,
      fnv1a64: fnv1a64Hex(entry.data),
    };
  }
  const manifest: ExportManifest = {
    source: modelId,
    format_version: MANIFEST_FORMAT_VERSION,
    tool_version: TOOL_VERSION,
    roles,
  };
  return { tensors, manifest };
}

export function stableManifestJson(manifest: ExportManifest): string {
  const roles: Record<string, ManifestRole> = {};
  for (const key of Object.keys(manifest.roles).sort()) {
    roles[key] = manifest.roles[key];
  }
  return JSON.stringify(
    {
      format_version: manifest.format_version,
      roles,
      source: manifest.source,
      tool_version: manifest.tool_version,
    },
    null,
    1
  );
}

export interface ExportResult {
  archivePath: string;
  manifestPath: string;
  manifest: ExportManifest;
}

export function exportBackbone(
  sourcePath: string,
  modelId: string,
  outDir: string,
  preset?: ModelPreset
): ExportResult {
  const resolved = preset ?? PRESETS[modelId];
  if (!resolved) {
    throw new Error(`unknown model id '${modelId}' (known: ${Object.keys(PRESETS).join(", ")})`);
  }
  const { tensors: source } = readArchive(sourcePath);
  const { tensors, manifest } = convertCheckpoint(source, modelId, resolved);
  fs.mkdirSync(outDir, { recursive: true });
  const archivePath = path.join(outDir, `${modelId}.qfa`);
  const manifestPath = path.join(outDir, `${modelId}.manifest.json`);
  writeArchive(archivePath, tensors, { source: modelId, tool_version: TOOL_VERSION });
  fs.writeFileSync(manifestPath, stableManifestJson(manifest) + "\n");
  return { archivePath, manifestPath, manifest };
}
