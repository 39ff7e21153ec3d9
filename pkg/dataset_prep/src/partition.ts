/**
 * Partition assignment: which classes belong to train / validation / test.
 *
 * Built-in schemes follow the standard benchmark splits by sorted class
 * order: "omniglot" puts the first 1200 of 1623 classes in train and the
 * remaining 423 in test; "mini" splits 100 classes 64/16/20. A custom
 * scheme is a file of "<class_name> <partition>" lines that must cover
 * every class exactly once.
 */

import * as fs from "node:fs";

import { Partition } from "./sdt1.js";

export function makePartition(
  classNames: string[],
  scheme: string,
): Map<string, Partition> {
  const sorted = [...classNames].sort();
  const out = new Map<string, Partition>();
  if (scheme === "omniglot") {
    if (sorted.length !== 1623) {
      throw new Error(`omniglot scheme expects 1623 classes, got ${sorted.length}`);
    }
    sorted.forEach((name, i) => out.set(name, i < 1200 ? "train" : "test"));
  } else if (scheme === "mini") {
    if (sorted.length !== 100) {
      throw new Error(`mini scheme expects 100 classes, got ${sorted.length}`);
    }
    sorted.forEach((name, i) =>
      out.set(name, i < 64 ? "train" : i < 80 ? "validation" : "test"),
    );
  } else if (scheme === "all-train") {
    sorted.forEach((name) => out.set(name, "train"));
  } else {
    // custom list file
    for (const line of fs.readFileSync(scheme, "utf-8").split("\n")) {
      if (!line.trim()) continue;
      const idx = line.lastIndexOf(" ");
      const name = line.slice(0, idx);
      const part = line.slice(idx + 1) as Partition;
      if (!["train", "validation", "test"].includes(part)) {
        throw new Error(`${scheme}: bad partition ${part!} for class ${name}`);
      }
      if (out.has(name)) {
        throw new Error(`${scheme}: class ${name} assigned twice`);
      }
      out.set(name, part);
    }
    const missing = sorted.filter((n) => !out.has(n));
    if (missing.length) {
      throw new Error(
        `${scheme}: missing partition for ${missing.length} classes ` +
        `(first: ${missing.slice(0, 3).join(", ")})`,
      );
    }
    const extra = [...out.keys()].filter((n) => !classNames.includes(n));
    if (extra.length) {
      throw new Error(`${scheme}: unknown classes ${extra.slice(0, 3).join(", ")}`);
    }
  }
  return out;
}

export function partitionFileText(partition: Map<string, Partition>): string {
  return [...partition.entries()].map(([n, p]) => `${n} ${p}\n`).join("");
}

export function countByPartition(partition: Map<string, Partition>): Record<string, number> {
  const counts: Record<string, number> = { train: 0, validation: 0, test: 0 };
  for (const p of partition.values()) counts[p]++;
  return counts;
}
