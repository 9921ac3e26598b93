/**
 * DPFM feature-map files (little-endian):
 * "DPFM" | version u32=1 | H | W | D | img_h | img_w | id_len | id utf-8 |
 * H*W*D float32 payload in (h, w, d) order.
 */

import { promises as fs } from "node:fs";
import path from "node:path";

const MAGIC = "DPFM";
const VERSION = 1;

export interface FeatureMap {
  imageId: string;
  height: number;
  width: number;
  depth: number;
  imagePxH: number;
  imagePxW: number;
  /** length height*width*depth, (h, w, d) order */
  data: Float32Array;
}

export function encodeFeatureMap(fm: FeatureMap): Buffer {
  const id = Buffer.from(fm.imageId, "utf-8");
  const expected = fm.height * fm.width * fm.depth;
  if (fm.data.length !== expected) {
    throw new Error(
      `payload length ${fm.data.length} != ${fm.height}x${fm.width}x${fm.depth}`,
    );
  }
  for (const v of fm.data) {
    if (!Number.isFinite(v)) throw new Error("payload contains non-finite values");
  }
  const header = Buffer.alloc(4 + 7 * 4);
  header.write(MAGIC, 0, "ascii");
  header.writeUInt32LE(VERSION, 4);
  header.writeUInt32LE(fm.height, 8);
  header.writeUInt32LE(fm.width, 12);
  header.writeUInt32LE(fm.depth, 16);
  header.writeUInt32LE(fm.imagePxH, 20);
  header.writeUInt32LE(fm.imagePxW, 24);
  header.writeUInt32LE(id.length, 28);
  const payload = Buffer.alloc(fm.data.length * 4);
  for (let i = 0; i < fm.data.length; i++) {
    payload.writeFloatLE(fm.data[i], i * 4);
  }
  return Buffer.concat([header, id, payload]);
}

export function decodeFeatureMap(raw: Buffer): FeatureMap {
  if (raw.length < 32) throw new Error("truncated header");
  if (raw.toString("ascii", 0, 4) !== MAGIC) throw new Error("bad magic");
  if (raw.readUInt32LE(4) !== VERSION) throw new Error("unsupported version");
  const height = raw.readUInt32LE(8);
  const width = raw.readUInt32LE(12);
  const depth = raw.readUInt32LE(16);
  const imagePxH = raw.readUInt32LE(20);
  const imagePxW = raw.readUInt32LE(24);
  const idLen = raw.readUInt32LE(28);
  const imageId = raw.toString("utf-8", 32, 32 + idLen);
  const payloadOffset = 32 + idLen;
  const count = height * width * depth;
  if (raw.length !== payloadOffset + count * 4) throw new Error("truncated payload");
  const data = new Float32Array(count);
  for (let i = 0; i < count; i++) {
    data[i] = raw.readFloatLE(payloadOffset + i * 4);
  }
  return { imageId, height, width, depth, imagePxH, imagePxW, data };
}

/** Write via a temp file and rename, so readers never see partial files. */
export async function writeFeatureMapFile(fm: FeatureMap, file: string): Promise<void> {
  const tmp = file + ".tmp";
  await fs.mkdir(path.dirname(file), { recursive: true });
  await fs.writeFile(tmp, encodeFeatureMap(fm));
  await fs.rename(tmp, file);
}

export async function readFeatureMapFile(file: string): Promise<FeatureMap> {
  return decodeFeatureMap(await fs.readFile(file));
}
