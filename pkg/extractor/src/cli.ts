#!/usr/bin/env node
/**
 * dpnet-extract --images DIR --backbone NAME --size 544 --out DIR
 *               [--weights model.json] [--depth N] [--seed N]
 *
 * Writes DPFM feature files and manifest.json under --out.
 */

import process from "node:process";
import { createBackbone, SEEDED_BACKBONE } from "./backbone.js";
import { runExtraction } from "./extract.js";

interface Args {
  images: string;
  backbone: string;
  size: number;
  out: string;
  weights?: string;
  depth: number;
  seed: number;
}

const USAGE =
  "usage: dpnet-extract --images DIR --backbone NAME --size 544 --out DIR " +
  "[--weights model.json] [--depth N] [--seed N]";

export function parseArgs(argv: string[]): Args {
  const defaults = { backbone: SEEDED_BACKBONE, size: 544, depth: 64, seed: 0 };
  const raw: Record<string, string> = {};
  for (let i = 0; i < argv.length; i += 2) {
    const flag = argv[i];
    if (!flag.startsWith("--") || i + 1 >= argv.length) {
      throw new Error(USAGE);
    }
    raw[flag.slice(2)] = argv[i + 1];
  }
  const known = new Set(["images", "backbone", "size", "out", "weights", "depth", "seed"]);
  for (const key of Object.keys(raw)) {
    if (!known.has(key)) throw new Error(`unknown flag --${key}\n${USAGE}`);
  }
  if (!raw.images || !raw.out) throw new Error(USAGE);
  const num = (key: string, fallback: number, min: number) => {
    if (!(key in raw)) return fallback;
    const v = Number(raw[key]);
    if (!Number.isFinite(v) || v < min) {
      throw new Error(`--${key} must be a number >= ${min}`);
    }
    return Math.floor(v);
  };
  return {
    images: raw.images,
    backbone: raw.backbone ?? defaults.backbone,
    size: num("size", defaults.size, 1),
    out: raw.out,
    weights: raw.weights,
    depth: num("depth", defaults.depth, 1),
    seed: num("seed", defaults.seed, 0),
  };
}

export async function main(argv: string[]): Promise<number> {
  let args: Args;
  try {
    args = parseArgs(argv);
  } catch (err) {
    console.error(err instanceof Error ? err.message : String(err));
    return 1;
  }
  // Library chatter (e.g. the tfjs backend banner) goes to stderr; stdout
  // carries only the machine-readable result lines below.
  console.log = (...chatter: unknown[]) => console.error(...chatter);
  try {
    const backbone = await createBackbone(args.backbone, {
      seed: args.seed,
      depth: args.depth,
      weights: args.weights,
    });
    const result = await runExtraction(
      { imagesDir: args.images, outDir: args.out, backbone, size: args.size },
      (msg) => console.error(msg),
    );
    process.stdout.write(`manifest=${result.manifestPath}\n`);
    process.stdout.write(`images=${result.entries.length} skipped=${result.skipped.length}\n`);
    return 0;
  } catch (err) {
    console.error(`error: ${err instanceof Error ? err.message : String(err)}`);
    return 2;
  }
}

const invokedDirectly =
  process.argv[1] !== undefined &&
  import.meta.url === new URL(`file://${process.argv[1]}`).href;
if (invokedDirectly) {
  main(process.argv.slice(2)).then((code) => process.exit(code));
}
