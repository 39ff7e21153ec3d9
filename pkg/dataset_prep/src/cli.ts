#!/usr/bin/env node
/**
 * dataset-prep: offline converter from image-folder datasets to SDT1.
 *
 *   convert <src_dir> --layout omniglot|mini --size N --partition SCHEME --out DIR
 *   make-partition --classes FILE --scheme omniglot|mini|all-train|FILE --out FILE
 *
 * SCHEME is a built-in name or a custom partition-list file. Exit codes:
 * 2 for usage errors, 1 for runtime failures.
 */

import * as fs from "node:fs";
import * as path from "node:path";
import * as process from "node:process";

import { convert, Layout, scanLayout } from "./convert.js";
import { countByPartition, makePartition, partitionFileText } from "./partition.js";

const USAGE = `usage:
  dataset-prep convert <src_dir> --layout omniglot|mini --size N --partition SCHEME --out DIR
  dataset-prep make-partition --classes FILE --scheme SCHEME --out FILE
  (SCHEME: omniglot | mini | all-train | path to a "<class> <partition>" file)`;

function parseFlags(argv: string[]): { positional: string[]; flags: Map<string, string> } {
  const positional: string[] = [];
  const flags = new Map<string, string>();
  for (let i = 0; i < argv.length; i++) {
    if (argv[i].startsWith("--")) {
      const key = argv[i].slice(2);
      const value = argv[i + 1];
      if (value === undefined) {
        throw new UsageError(`flag --${key} needs a value`);
      }
      flags.set(key, value);
      i++;
    } else {
      positional.push(argv[i]);
    }
  }
  return { positional, flags };
}

class UsageError extends Error {}

function need(flags: Map<string, string>, key: string): string {
  const v = flags.get(key);
  if (v === undefined) {
    throw new UsageError(`missing required flag --${key}`);
  }
  return v;
}

function cmdConvert(argv: string[]): void {
  const { positional, flags } = parseFlags(argv);
  if (positional.length !== 1) {
    throw new UsageError("convert expects exactly one source directory");
  }
  const layout = need(flags, "layout") as Layout;
  if (layout !== "omniglot" && layout !== "mini") {
    throw new UsageError(`unknown layout ${layout}`);
  }
  const size = parseInt(need(flags, "size"), 10);
  if (!(size > 0)) {
    throw new UsageError("--size must be a positive integer");
  }
  const scheme = need(flags, "partition");
  const outDir = need(flags, "out");
  const classNames = scanLayout(positional[0], layout).map((m) => m.name);
  const partition = makePartition(classNames, scheme);
  const { classes, samples } = convert(positional[0], layout, size, partition, outDir);
  console.log(`wrote ${classes} classes / ${samples} samples to ${outDir}`);
}

function cmdMakePartition(argv: string[]): void {
  const { positional, flags } = parseFlags(argv);
  if (positional.length !== 0) {
    throw new UsageError("make-partition takes only flags");
  }
  const classFile = need(flags, "classes");
  const scheme = need(flags, "scheme");
  const outFile = need(flags, "out");
  const classNames = fs
    .readFileSync(classFile, "utf-8")
    .split("\n")
    .map((l) => l.trim())
    .filter((l) => l.length);
  const partition = makePartition(classNames, scheme);
  fs.mkdirSync(path.dirname(path.resolve(outFile)), { recursive: true });
  fs.writeFileSync(outFile, partitionFileText(partition));
  const counts = countByPartition(partition);
  console.log(
    `wrote ${partition.size} assignments to ${outFile} ` +
    `(train ${counts.train} / validation ${counts.validation} / test ${counts.test})`,
  );
}

export function main(argv: string[]): number {
  try {
    const [command, ...rest] = argv;
    if (command === "convert") {
      cmdConvert(rest);
    } else if (command === "make-partition") {
      cmdMakePartition(rest);
    } else {
      throw new UsageError(command ? `unknown command ${command}` : "no command given");
    }
    return 0;
  } catch (err) {
    if (err instanceof UsageError) {
      console.error(`error: ${err.message}\n${USAGE}`);
      return 2;
    }
    console.error(`error: ${(err as Error).message}`);
    return 1;
  }
}

if (import.meta.url === `file://${process.argv[1]}`) {
  process.exit(main(process.argv.slice(2)));
}
