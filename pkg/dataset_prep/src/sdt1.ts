/**
 * Writer (and reader, used by tests) for the SDT1 dataset directory layout:
 *
 *   tensors.sdt1   magic "SDT1"; u32 class count; per class: u32 sample
 *                  count, u8 rank, rank x u32 dims, f64 LE sample data
 *   labels.txt     one class name per line, in tensor order
 *   split.bin      per class, bitmap of labeled flags, LSB first
 *   partition.txt  one line per class: "<name> <train|validation|test>"
 *
 * All multi-byte integers are little-endian.
 */

import * as fs from "node:fs";
import * as path from "node:path";

export const TENSOR_FILE = "tensors.sdt1";
export const LABEL_FILE = "labels.txt";
export const SPLIT_FILE = "split.bin";
export const PARTITION_FILE = "partition.txt";

export type Partition = "train" | "validation" | "test";

export interface ClassTensors {
  name: string;
  /** sample-major data, each sample `dims`-shaped, values in [0, 1] */
  samples: Float64Array[];
  dims: number[];
}

export function encodeTensors(classes: ClassTensors[]): Buffer {
  const parts: Buffer[] = [];
  const head = Buffer.alloc(8);
  head.write("SDT1", 0, "latin1");
  head.writeUInt32LE(classes.length, 4);
  parts.push(head);
  for (const cls of classes) {
    const per = cls.dims.reduce((a, b) => a * b, 1);
    const meta = Buffer.alloc(4 + 1 + 4 * cls.dims.length);
    meta.writeUInt32LE(cls.samples.length, 0);
    meta.writeUInt8(cls.dims.length, 4);
    cls.dims.forEach((d, i) => meta.writeUInt32LE(d, 5 + 4 * i));
    parts.push(meta);
    for (const sample of cls.samples) {
      if (sample.length !== per) {
        throw new Error(
          `class ${cls.name}: sample has ${sample.length} values, dims imply ${per}`,
        );
      }
      parts.push(Buffer.from(sample.buffer, sample.byteOffset, sample.byteLength));
    }
  }
  return Buffer.concat(parts);
}

export function writeDataset(
  outDir: string,
  classes: ClassTensors[],
  partition: Map<string, Partition>,
): void {
  for (const cls of classes) {
    if (!partition.has(cls.name)) {
      throw new Error(`no partition assigned for class ${cls.name}`);
    }
  }
  fs.mkdirSync(outDir, { recursive: true });
  fs.writeFileSync(path.join(outDir, TENSOR_FILE), encodeTensors(classes));
  fs.writeFileSync(
    path.join(outDir, LABEL_FILE),
    classes.map((c) => c.name + "\n").join(""),
  );
  // every converted sample starts out labeled; semi-supervised splits are
  // re-tagged downstream
  const bitmaps: Buffer[] = [];
  for (const cls of classes) {
    const bytes = Buffer.alloc(Math.ceil(cls.samples.length / 8));
    for (let i = 0; i < cls.samples.length; i++) {
      bytes[i >> 3] |= 1 << (i & 7);
    }
    bitmaps.push(bytes);
  }
  fs.writeFileSync(path.join(outDir, SPLIT_FILE), Buffer.concat(bitmaps));
  fs.writeFileSync(
    path.join(outDir, PARTITION_FILE),
    classes.map((c) => `${c.name} ${partition.get(c.name)}\n`).join(""),
  );
}

export interface DecodedDataset {
  classes: { name: string; dims: number[]; samples: Float64Array[] }[];
  labeled: boolean[][];
  partition: Map<string, Partition>;
}

export function readDataset(dir: string): DecodedDataset {
  const blob = fs.readFileSync(path.join(dir, TENSOR_FILE));
  if (blob.subarray(0, 4).toString("latin1") !== "SDT1") {
    throw new Error(`${dir}/${TENSOR_FILE}: bad magic`);
  }
  const nClasses = blob.readUInt32LE(4);
  let off = 8;
  const names = fs
    .readFileSync(path.join(dir, LABEL_FILE), "utf-8")
    .split("\n")
    .filter((l) => l.length);
  if (names.length !== nClasses) {
    throw new Error(`${dir}: ${names.length} labels for ${nClasses} classes`);
  }
  const classes = [];
  for (let c = 0; c < nClasses; c++) {
    const count = blob.readUInt32LE(off);
    const rank = blob.readUInt8(off + 4);
    const dims: number[] = [];
    for (let r = 0; r < rank; r++) dims.push(blob.readUInt32LE(off + 5 + 4 * r));
    off += 5 + 4 * rank;
    const per = dims.reduce((a, b) => a * b, 1);
    const samples: Float64Array[] = [];
    for (let s = 0; s < count; s++) {
      const bytes = blob.subarray(off, off + 8 * per);
      samples.push(new Float64Array(bytes.buffer.slice(bytes.byteOffset, bytes.byteOffset + 8 * per)));
      off += 8 * per;
    }
    classes.push({ name: names[c], dims, samples });
  }

  const split = fs.readFileSync(path.join(dir, SPLIT_FILE));
  let soff = 0;
  const labeled: boolean[][] = [];
  for (const cls of classes) {
    const flags: boolean[] = [];
    for (let i = 0; i < cls.samples.length; i++) {
      flags.push((split[soff + (i >> 3)] & (1 << (i & 7))) !== 0);
    }
    soff += Math.ceil(cls.samples.length / 8);
    labeled.push(flags);
  }

  const partition = new Map<string, Partition>();
  for (const line of fs
    .readFileSync(path.join(dir, PARTITION_FILE), "utf-8")
    .split("\n")) {
    if (!line.trim()) continue;
    const idx = line.lastIndexOf(" ");
    partition.set(line.slice(0, idx), line.slice(idx + 1) as Partition);
  }
  return { classes, labeled, partition };
}
