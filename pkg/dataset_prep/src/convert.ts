/**
 * Folder-layout scanning and the image-to-SDT1 conversion pipeline.
 *
 * Two source layouts are understood:
 *  - "omniglot": two directory levels, root/<alphabet>/<character>/img.png;
 *    the class name is "<alphabet>/<character>" and output is grayscale.
 *  - "mini": one directory level, root/<class>/img.png; output is RGB.
 *
 * Files are processed in sorted order so repeated conversions are
 * byte-identical. Pixel values are scaled to [0, 1] as float64.
 */

import * as fs from "node:fs";
import * as path from "node:path";

import { decodeImage, resizeBilinear } from "./image.js";
import { ClassTensors, Partition, writeDataset } from "./sdt1.js";

export type Layout = "omniglot" | "mini";

const IMAGE_EXTENSIONS = new Set([".png", ".ppm", ".pgm", ".pnm"]);

export interface ManifestEntry {
  name: string;
  files: string[];
}

function listDirs(dir: string): string[] {
  return fs
    .readdirSync(dir, { withFileTypes: true })
    .filter((e) => e.isDirectory())
    .map((e) => e.name)
    .sort();
}

function listImages(dir: string): string[] {
  return fs
    .readdirSync(dir, { withFileTypes: true })
    .filter((e) => e.isFile() && IMAGE_EXTENSIONS.has(path.extname(e.name).toLowerCase()))
    .map((e) => path.join(dir, e.name))
    .sort();
}

export function scanLayout(srcDir: string, layout: Layout): ManifestEntry[] {
  if (!fs.existsSync(srcDir)) {
    throw new Error(`source directory ${srcDir} does not exist`);
  }
  const manifest: ManifestEntry[] = [];
  if (layout === "mini") {
    for (const cls of listDirs(srcDir)) {
      manifest.push({ name: cls, files: listImages(path.join(srcDir, cls)) });
    }
  } else {
    for (const alphabet of listDirs(srcDir)) {
      for (const character of listDirs(path.join(srcDir, alphabet))) {
        manifest.push({
          name: `${alphabet}/${character}`,
          files: listImages(path.join(srcDir, alphabet, character)),
        });
      }
    }
  }
  const empty = manifest.filter((m) => m.files.length === 0).map((m) => m.name);
  if (manifest.length === 0 || empty.length) {
    throw new Error(
      manifest.length === 0
        ? `no classes found under ${srcDir} for layout ${layout}`
        : `classes without images: ${empty.slice(0, 5).join(", ")}`,
    );
  }
  return manifest;
}

export function convert(
  srcDir: string,
  layout: Layout,
  targetSize: number,
  partition: Map<string, Partition>,
  outDir: string,
): { classes: number; samples: number } {
  const manifest = scanLayout(srcDir, layout);
  const grayscale = layout === "omniglot";
  const channels = grayscale ? 1 : 3;
  const classes: ClassTensors[] = manifest.map((entry) => ({
    name: entry.name,
    dims: [channels, targetSize, targetSize],
    samples: entry.files.map((file) =>
      resizeBilinear(decodeImage(fs.readFileSync(file), file), targetSize, grayscale),
    ),
  }));
  writeDataset(outDir, classes, partition);
  return {
    classes: classes.length,
    samples: classes.reduce((a, c) => a + c.samples.length, 0),
  };
}
