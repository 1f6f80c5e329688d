#!/usr/bin/env node
// entry point: adapter <job-dir>; exit 0 on success, 2 on usage, 3 on any job failure
import { JobError, runJob } from "./protocol";

function main(argv: string[]): number {
  const jobDir = argv[2];
  if (!jobDir || argv.length > 3) {
    process.stderr.write("usage: adapter <job-dir>\n");
    return 2;
  }
  try {
    runJob(jobDir);
  } catch (e) {
    const prefix = e instanceof JobError ? "adapter" : "adapter internal error";
    process.stderr.write(`${prefix}: ${e instanceof Error ? e.message : String(e)}\n`);
    return 3;
  }
  return 0;
}

process.exit(main(process.argv));
