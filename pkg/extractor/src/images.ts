/** Image decoding (PNG/JPEG, pure JS) into float RGB planes. */

import { promises as fs } from "node:fs";
import path from "node:path";
import { PNG } from "pngjs";
import jpeg from "jpeg-js";

export interface DecodedImage {
  width: number;
  height: number;
  /** RGB interleaved, values in [0, 1], length width*height*3 */
  rgb: Float32Array;
}

export const IMAGE_EXTENSIONS = new Set([".png", ".jpg", ".jpeg"]);

function rgbaToRgb(data: Uint8Array, width: number, height: number): Float32Array {
  const out = new Float32Array(width * height * 3);
  for (let i = 0, j = 0; i < width * height * 4; i += 4, j += 3) {
    out[j] = data[i] / 255;
    out[j + 1] = data[i + 1] / 255;
    out[j + 2] = data[i + 2] / 255;
  }
  return out;
}

export async function decodeImage(file: string): Promise<DecodedImage> {
  const raw = await fs.readFile(file);
  const ext = path.extname(file).toLowerCase();
  if (ext === ".png") {
    const png = PNG.sync.read(raw);
    return { width: png.width, height: png.height, rgb: rgbaToRgb(png.data, png.width, png.height) };
  }
  if (ext === ".jpg" || ext === ".jpeg") {
    const img = jpeg.decode(raw, { useTArray: true, maxMemoryUsageInMB: 1024 });
    return { width: img.width, height: img.height, rgb: rgbaToRgb(img.data, img.width, img.height) };
  }
  throw new Error(`unsupported image extension '${ext}'`);
}
