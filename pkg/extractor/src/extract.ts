/**
 * Extraction job: walk an image folder (one subdirectory per class), run the
 * backbone on each image, and emit DPFM files plus a manifest the trainer
 * can consume directly. Unreadable images are skipped with a warning and
 * listed in a skip report.
 */

import { promises as fs } from "node:fs";
import path from "node:path";
import { writeFeatureMapFile } from "./dpfm.js";
import { decodeImage, IMAGE_EXTENSIONS } from "./images.js";
import type { Backbone } from "./backbone.js";

export interface ExtractJob {
  imagesDir: string;
  outDir: string;
  backbone: Backbone;
  size: number;
}

export interface ManifestEntry {
  id: string;
  path: string;
  label: number;
  class_name: string;
}

export interface ExtractResult {
  manifestPath: string;
  entries: ManifestEntry[];
  skipped: Array<{ path: string; reason: string }>;
}

interface Candidate {
  file: string;
  className: string;
  label: number;
  id: string;
}

/** Class labels come from subdirectory names, sorted lexicographically. */
export async function listCandidates(imagesDir: string): Promise<Candidate[]> {
  const dirents = await fs.readdir(imagesDir, { withFileTypes: true });
  const classDirs = dirents
    .filter((d) => d.isDirectory())
    .map((d) => d.name)
    .sort();
  if (classDirs.length === 0) {
    throw new Error(`no class subdirectories under '${imagesDir}'`);
  }
  const out: Candidate[] = [];
  for (let label = 0; label < classDirs.length; label++) {
    const className = classDirs[label];
    const files = (await fs.readdir(path.join(imagesDir, className)))
      .filter((f) => IMAGE_EXTENSIONS.has(path.extname(f).toLowerCase()))
      .sort();
    for (const f of files) {
      const stem = path.basename(f, path.extname(f));
      out.push({
        file: path.join(imagesDir, className, f),
        className,
        label,
        id: `${className}/${stem}`,
      });
    }
  }
  return out;
}

async function writeJsonAtomic(file: string, value: unknown): Promise<void> {
  const tmp = file + ".tmp";
  await fs.writeFile(tmp, JSON.stringify(value, null, 1) + "\n");
  await fs.rename(tmp, file);
}

export async function runExtraction(
  job: ExtractJob,
  log: (msg: string) => void = () => {},
): Promise<ExtractResult> {
  const candidates = await listCandidates(job.imagesDir);
  await fs.mkdir(path.join(job.outDir, "features"), { recursive: true });
  const entries: ManifestEntry[] = [];
  const skipped: Array<{ path: string; reason: string }> = [];
  for (const cand of candidates) {
    let decoded;
    try {
      decoded = await decodeImage(cand.file);
    } catch (err) {
      const reason = err instanceof Error ? err.message : String(err);
      log(`warning: skipping unreadable image ${cand.file}: ${reason}`);
      skipped.push({ path: cand.file, reason });
      continue;
    }
    const grid = await job.backbone.run(decoded, job.size);
    const fileName = cand.id.replace(/[/\\]/g, "__") + ".dpfm";
    const relPath = path.join("features", fileName);
    await writeFeatureMapFile(
      {
        imageId: cand.id,
        height: grid.height,
        width: grid.width,
        depth: grid.depth,
        imagePxH: job.size,
        imagePxW: job.size,
        data: grid.data,
      },
      path.join(job.outDir, relPath),
    );
    entries.push({
      id: cand.id,
      path: relPath,
      label: cand.label,
      class_name: cand.className,
    });
    log(`wrote ${relPath} (${grid.height}x${grid.width}x${grid.depth})`);
  }
  if (entries.length === 0) {
    throw new Error("every candidate image was skipped; nothing extracted");
  }
  const manifestPath = path.join(job.outDir, "manifest.json");
  await writeJsonAtomic(manifestPath, entries);
  await writeJsonAtomic(path.join(job.outDir, "skipped.json"), skipped);
  return { manifestPath, entries, skipped };
}
