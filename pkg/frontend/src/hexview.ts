/**
 * Snapshot memory inspection: base64 decoding, hex dump lines, and
 * printable-string extraction (the classic triage pass that surfaces
 * decrypted plaintext in a post-write memory dump).
 */
import type { SnapshotDoc, SnapshotRegion } from "./types.js";

const B64_ALPHABET =
  "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
const B64_VALUE = new Map<string, number>(
  [...B64_ALPHABET].map((ch, i) => [ch, i]),
);

/** RFC 4648 base64 decoder; works the same in the browser and in node. */
export function decodeBase64(b64: string): Uint8Array {
  const clean = b64.replace(/\s+/g, "");
  const padding = clean.endsWith("==") ? 2 : clean.endsWith("=") ? 1 : 0;
  const body = clean.slice(0, clean.length - padding);
  const out = new Uint8Array(Math.floor((body.length * 6) / 8));
  let bits = 0;
  let bitCount = 0;
  let offset = 0;
  for (const ch of body) {
    const value = B64_VALUE.get(ch);
    if (value === undefined) {
      throw new Error(`invalid base64 character ${JSON.stringify(ch)}`);
    }
    bits = (bits << 6) | value;
    bitCount += 6;
    if (bitCount >= 8) {
      bitCount -= 8;
      out[offset++] = (bits >> bitCount) & 0xff;
    }
  }
  return out.subarray(0, offset);
}

/** Classic 16-byte-wide dump: address, hex bytes, printable gutter. */
export function hexdump(data: Uint8Array, baseAddress = 0): string[] {
  const lines: string[] = [];
  for (let row = 0; row < data.length; row += 16) {
    const chunk = data.subarray(row, row + 16);
    const hex = [...chunk]
      .map((byte) => byte.toString(16).padStart(2, "0"))
      .join(" ")
      .padEnd(47, " ");
    const text = [...chunk]
      .map((byte) => (byte >= 0x20 && byte < 0x7f ? String.fromCharCode(byte) : "."))
      .join("");
    const address = (baseAddress + row).toString(16).padStart(12, "0");
    lines.push(`${address}  ${hex}  |${text}|`);
  }
  return lines;
}

/** ASCII runs of at least `minLength` characters. */
export function extractStrings(data: Uint8Array, minLength = 4): string[] {
  const found: string[] = [];
  let run = "";
  for (let i = 0; i <= data.length; i += 1) {
    const byte = i < data.length ? (data[i] as number) : 0;
    if (byte >= 0x20 && byte < 0x7f) {
      run += String.fromCharCode(byte);
      continue;
    }
    if (run.length >= minLength) found.push(run);
    run = "";
  }
  return found;
}

export interface RegionStrings {
  region: SnapshotRegion;
  strings: string[];
}

/** The strings panel: per-region extraction over a snapshot's memory. */
export function snapshotStrings(
  snapshot: SnapshotDoc,
  minLength = 4,
): RegionStrings[] {
  return snapshot.regions.map((region) => ({
    region,
    strings: extractStrings(decodeBase64(region.content_b64), minLength),
  }));
}
