/**
 * Stride-32 convolutional backbones. A 544x544 input yields a 17x17 grid.
 *
 * Two kinds are supported: `cnn32-seeded`, a deterministic randomly
 * initialized stack (for pipeline validation and tests, no downloads), and
 * named zoo architectures loaded from a local tfjs layers-model directory
 * via --weights. Missing weights are a hard error, never a silent fallback.
 */

import { promises as fs } from "node:fs";
import path from "node:path";
import * as tf from "@tensorflow/tfjs";
import { SplitMix64 } from "./prng.js";
import type { DecodedImage } from "./images.js";

export interface ActivationGrid {
  height: number;
  width: number;
  depth: number;
  /** (h, w, d) order */
  data: Float32Array;
}

export interface Backbone {
  name: string;
  /** Total spatial downsampling factor (32 for all supported stacks). */
  stride: number;
  run(image: DecodedImage, size: number): Promise<ActivationGrid>;
}

export const SEEDED_BACKBONE = "cnn32-seeded";
export const ZOO_BACKBONES = ["vgg19", "resnet50"];

function toInputTensor(image: DecodedImage, size: number): tf.Tensor4D {
  return tf.tidy(() => {
    const t = tf.tensor3d(image.rgb, [image.height, image.width, 3]);
    const resized = tf.image.resizeBilinear(t, [size, size]);
    const centered = resized.sub(0.5);
    return centered.expandDims(0) as tf.Tensor4D;
  });
}

async function gridFromOutput(out: tf.Tensor4D): Promise<ActivationGrid> {
  const [, h, w, d] = out.shape;
  const data = (await out.data()) as Float32Array;
  out.dispose();
  return { height: h, width: w, depth: d, data: new Float32Array(data) };
}

/** Deterministic conv stack: stride-4 stem then three stride-2 stages. */
export class SeededCnn32 implements Backbone {
  readonly name = SEEDED_BACKBONE;
  readonly stride = 32;
  private kernels: tf.Tensor4D[] = [];

  constructor(seed: number, readonly depth: number = 64) {
    const rng = new SplitMix64(seed);
    const plan: Array<[number, number, number]> = [
      // [kernel, inChannels, outChannels]; strides are 4, 2, 2, 2.
      [4, 3, 16],
      [3, 16, 32],
      [3, 32, 64],
      [3, 64, depth],
    ];
    for (const [k, cin, cout] of plan) {
      const scale = Math.sqrt(6 / (k * k * cin));
      const weights = rng.uniformArray(k * k * cin * cout, scale);
      this.kernels.push(tf.tensor4d(weights, [k, k, cin, cout]));
    }
  }

  async run(image: DecodedImage, size: number): Promise<ActivationGrid> {
    if (size % this.stride !== 0) {
      throw new Error(`input size ${size} is not a multiple of stride ${this.stride}`);
    }
    const out = tf.tidy(() => {
      let x = toInputTensor(image, size);
      const strides = [4, 2, 2, 2];
      this.kernels.forEach((kernel, i) => {
        x = tf.relu(tf.conv2d(x, kernel, strides[i], "same"));
      });
      return x;
    });
    return gridFromOutput(out as tf.Tensor4D);
  }

  dispose(): void {
    this.kernels.forEach((k) => k.dispose());
  }
}

/** Minimal file-system IO handler for tfjs layers models saved on disk. */
function fileIOHandler(modelJsonPath: string): tf.io.IOHandler {
  return {
    load: async () => {
      const dir = path.dirname(modelJsonPath);
      const modelJson = JSON.parse(await fs.readFile(modelJsonPath, "utf-8"));
      const manifest = modelJson.weightsManifest ?? [];
      const specs: tf.io.WeightsManifestEntry[] = [];
      const buffers: Buffer[] = [];
      for (const group of manifest) {
        specs.push(...group.weights);
        for (const p of group.paths) {
          buffers.push(await fs.readFile(path.join(dir, p)));
        }
      }
      const weightData = Buffer.concat(buffers);
      return {
        modelTopology: modelJson.modelTopology,
        format: modelJson.format,
        generatedBy: modelJson.generatedBy,
        convertedBy: modelJson.convertedBy,
        weightSpecs: specs,
        weightData: weightData.buffer.slice(
          weightData.byteOffset,
          weightData.byteOffset + weightData.byteLength,
        ),
      };
    },
  };
}

/** Pretrained zoo architecture loaded from a local tfjs model directory. */
export class FileModelBackbone implements Backbone {
  readonly stride = 32;
  private constructor(readonly name: string, private model: tf.LayersModel) {}

  static async load(name: string, weightsPath: string): Promise<FileModelBackbone> {
    try {
      await fs.access(weightsPath);
    } catch {
      throw new Error(
        `backbone '${name}' needs pretrained weights, but '${weightsPath}' does not exist`,
      );
    }
    const model = await tf.loadLayersModel(fileIOHandler(weightsPath));
    return new FileModelBackbone(name, model);
  }

  async run(image: DecodedImage, size: number): Promise<ActivationGrid> {
    const out = tf.tidy(
      () => this.model.predict(toInputTensor(image, size)) as tf.Tensor4D,
    );
    return gridFromOutput(out);
  }
}

export async function createBackbone(
  name: string,
  opts: { seed: number; depth: number; weights?: string },
): Promise<Backbone> {
  if (name === SEEDED_BACKBONE) {
    return new SeededCnn32(opts.seed, opts.depth);
  }
  if (ZOO_BACKBONES.includes(name)) {
    if (!opts.weights) {
      throw new Error(
        `backbone '${name}' needs pretrained weights: pass --weights <model.json>`,
      );
    }
    return FileModelBackbone.load(name, opts.weights);
  }
  throw new Error(
    `unknown backbone '${name}' (expected ${SEEDED_BACKBONE} or one of ${ZOO_BACKBONES.join(", ")})`,
  );
}
