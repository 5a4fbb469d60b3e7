#!/usr/bin/env node
/**
 * Convert a locally downloaded pretrained checkpoint into a tensor archive
 * plus role manifest.
 *
 * Usage:
 *   qbae-export --model <id> --source <checkpoint> --out <dir> [--spec <json>]
 *
 *   --model, -m   one of: dinov2_vitl14_reg, dino_vitb8, openclip_vitl14,
 *                 openclip_vitb32, mae_vitl16, mae_vitb16
 *   --source, -s  path to the source checkpoint (safetensors-compatible)
 *   --out, -o     output directory for <model>.qfa + <model>.manifest.json
 *   --spec        optional JSON file overriding the preset geometry
 *                 {depth, width, heads, patchSize, specialTokens, posGrid,
 *                  family, registers} - for scaled-down source checkpoints
 *
 * Re-running on the same inputs produces byte-identical outputs.
 */

import * as fs from "fs";

import { exportBackbone } from "./convert";
import { ModelPreset, PRESETS } from "./specs";

interface Args {
  model?: string;
  source?: string;
  out?: string;
  spec?: string;
  help?: boolean;
}

function parseArgs(argv: string[]): Args {
  const args: Args = {};
  for (let i = 0; i < argv.length; i++) {
    switch (argv[i]) {
      case "--model":
      case "-m":
        args.model = argv[++i];
        break;
      case "--source":
      case "-s":
        args.source = argv[++i];
        break;
      case "--out":
      case "-o":
        args.out = argv[++i];
        break;
      case "--spec":
        args.spec = argv[++i];
        break;
      case "--help":
      case "-h":
        args.help = true;
        break;
      default:
        console.error(`unknown argument: ${argv[i]}`);
        process.exit(2);
    }
  }
  return args;
}

function usage(): void {
  console.log("usage: qbae-export --model <id> --source <checkpoint> --out <dir> [--spec <json>]");
  console.log(`known models: ${Object.keys(PRESETS).join(", ")}`);
}

export function main(argv: string[]): number {
  const args = parseArgs(argv);
  if (args.help) {
    usage();
    return 0;
  }
  if (!args.model || !args.source || !args.out) {
    usage();
    return 2;
  }
  try {
    let preset: ModelPreset | undefined;
    if (args.spec) {
      const raw = JSON.parse(fs.readFileSync(args.spec, "utf-8"));
      preset = {
        spec: {
          depth: raw.depth,
          width: raw.width,
          heads: raw.heads,
          patchSize: raw.patchSize,
          specialTokens: raw.specialTokens,
          posGrid: raw.posGrid,
          mlpRatio: raw.mlpRatio ?? 4.0,
          channels: raw.channels ?? 3,
        },
        family: raw.family ?? "timm",
        registers: raw.registers ?? 0,
      };
    }
    const result = exportBackbone(args.source, args.model, args.out, preset);
    const n = Object.keys(result.manifest.roles).length;
    console.log(`${result.archivePath}: ${n} tensors`);
    console.log(result.manifestPath);
    return 0;
  } catch (err) {
    console.error(`error: ${err instanceof Error ? err.message : err}`);
    return 1;
  }
}

if (require.main === module) {
  process.exit(main(process.argv.slice(2)));
}
