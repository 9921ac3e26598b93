import { promises as fs } from "node:fs";
import path from "node:path";
import { PNG } from "pngjs";

/** Deterministic synthetic photo: class-dependent pattern plus gradient. */
export function makePng(width: number, height: number, variant: number): Buffer {
  const png = new PNG({ width, height });
  for (let y = 0; y < height; y++) {
    for (let x = 0; x < width; x++) {
      const i = (y * width + x) * 4;
      const stripe = Math.sin((x + variant * 13) / (3 + variant)) > 0 ? 200 : 40;
      png.data[i] = (x * 255 / width) | 0;
      png.data[i + 1] = stripe;
      png.data[i + 2] = ((x + y + 37 * variant) % 256);
      png.data[i + 3] = 255;
    }
  }
  return PNG.sync.write(png);
}

export async function makeImageTree(
  root: string,
  classes: Record<string, number>,
  size = 64,
): Promise<void> {
  let variant = 0;
  for (const [className, count] of Object.entries(classes)) {
    const dir = path.join(root, className);
    await fs.mkdir(dir, { recursive: true });
    for (let i = 0; i < count; i++) {
      variant += 1;
      await fs.writeFile(path.join(dir, `img_${i}.png`), makePng(size, size, variant));
    }
  }
}
