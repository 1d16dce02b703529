import readline from "node:readline";
import { stdin } from "node:process";

import { chooseAction, type DecisionPayload } from "./heuristic.js";

// One decision payload per input line, one {"action": N} reply per output
// line.  A malformed line gets an error object back instead of silence, so
// the caller can retry or fall back without waiting on a timeout.
const lines = readline.createInterface({ input: stdin, terminal: false });

lines.on("line", (line) => {
  const text = line.trim();
  if (text.length === 0) {
    return;
  }
  try {
    const payload = JSON.parse(text) as DecisionPayload;
    console.log(JSON.stringify({ action: chooseAction(payload) }));
  } catch (error) {
    console.log(JSON.stringify({ error: String(error) }));
  }
});
