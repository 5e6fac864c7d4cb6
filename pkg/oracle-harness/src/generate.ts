/**
 * Golden-file generator CLI.
 *
 *   node dist/generate.js --spec cases.json --out ../goldens
 *
 * Reads the JSON case spec, computes reference tensors for each case and
 * writes one binary record file per case plus a copy of the spec into the
 * output directory.  Regenerating from the same spec is byte-identical.
 */

import * as fs from "node:fs";
import * as path from "node:path";
import { encodeRecords } from "./binio";
import { CaseSpec, generateCase } from "./golden";

function parseArgs(argv: string[]): { spec: string; out: string } {
  let spec = "cases.json";
  let out = "goldens";
  for (let i = 0; i < argv.length; i++) {
    if (argv[i] === "--spec") spec = argv[++i];
    else if (argv[i] === "--out") out = argv[++i];
    else throw new Error(`unknown argument ${argv[i]}`);
  }
  return { spec, out };
}

export function generateAll(specPath: string, outDir: string): string[] {
  const parsed = JSON.parse(fs.readFileSync(specPath, "utf-8"));
  const cases: CaseSpec[] = parsed.cases;
  if (!Array.isArray(cases) || cases.length === 0) {
    throw new Error(`${specPath}: no cases`);
  }
  fs.mkdirSync(outDir, { recursive: true });
  const written: string[] = [];
  for (const spec of cases) {
    const records = generateCase(spec);
    const file = path.join(outDir, `${spec.name}.cnnf`);
    fs.writeFileSync(file, encodeRecords(records));
    written.push(file);
    console.log(`${spec.name}: ${records.length} records -> ${file}`);
  }
  fs.copyFileSync(specPath, path.join(outDir, "cases.json"));
  return written;
}

if (require.main === module) {
  const { spec, out } = parseArgs(process.argv.slice(2));
  generateAll(spec, out);
}
