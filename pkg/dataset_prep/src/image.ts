/**
 * Minimal self-contained image decoding (PNG and PNM) plus bilinear resize.
 *
 * PNG support covers the baseline cases emitted by common tooling: 8-bit
 * depth, color types greyscale / RGB / palette / grey+alpha / RGBA,
 * non-interlaced. Alpha is dropped. Everything decodes to packed RGB bytes.
 */

import * as zlib from "node:zlib";

export interface RgbImage {
  width: number;
  height: number;
  /** Packed RGB, row-major, 3 bytes per pixel. */
  data: Uint8Array;
}

const PNG_SIGNATURE = [137, 80, 78, 71, 13, 10, 26, 10];

export function isPng(buf: Uint8Array): boolean {
  return PNG_SIGNATURE.every((b, i) => buf[i] === b);
}

export function decodePng(buf: Uint8Array, origin = "<png>"): RgbImage {
  if (!isPng(buf)) {
    throw new Error(`${origin}: not a PNG file`);
  }
  const view = new DataView(buf.buffer, buf.byteOffset, buf.byteLength);
  let off = 8;
  let width = 0;
  let height = 0;
  let bitDepth = 0;
  let colorType = 0;
  let palette: Uint8Array | null = null;
  const idat: Uint8Array[] = [];

  while (off < buf.length) {
    const len = view.getUint32(off);
    const type = Buffer.from(buf.subarray(off + 4, off + 8)).toString("latin1");
    const data = buf.subarray(off + 8, off + 8 + len);
    off += 12 + len; // length + type + data + crc
    if (type === "IHDR") {
      const hv = new DataView(data.buffer, data.byteOffset, data.byteLength);
      width = hv.getUint32(0);
      height = hv.getUint32(4);
      bitDepth = data[8];
      colorType = data[9];
      if (data[12] !== 0) {
        throw new Error(`${origin}: interlaced PNG not supported`);
      }
      if (bitDepth !== 8) {
        throw new Error(`${origin}: only 8-bit PNG supported, got depth ${bitDepth}`);
      }
    } else if (type === "PLTE") {
      palette = Uint8Array.from(data);
    } else if (type === "IDAT") {
      idat.push(Uint8Array.from(data));
    } else if (type === "IEND") {
      break;
    }
  }
  if (!width || !height) {
    throw new Error(`${origin}: missing IHDR`);
  }

  const channels = { 0: 1, 2: 3, 3: 1, 4: 2, 6: 4 }[colorType];
  if (channels === undefined) {
    throw new Error(`${origin}: unsupported PNG color type ${colorType}`);
  }
  const raw = zlib.inflateSync(Buffer.concat(idat.map((d) => Buffer.from(d))));
  const stride = width * channels;
  if (raw.length < height * (stride + 1)) {
    throw new Error(`${origin}: truncated PNG pixel data`);
  }

  // undo per-row filters in place
  const lines = new Uint8Array(height * stride);
  for (let y = 0; y < height; y++) {
    const filter = raw[y * (stride + 1)];
    const rowIn = raw.subarray(y * (stride + 1) + 1, (y + 1) * (stride + 1));
    const row = lines.subarray(y * stride, (y + 1) * stride);
    const prev = y > 0 ? lines.subarray((y - 1) * stride, y * stride) : null;
    for (let x = 0; x < stride; x++) {
      const a = x >= channels ? row[x - channels] : 0;
      const b = prev ? prev[x] : 0;
      const c = prev && x >= channels ? prev[x - channels] : 0;
      let v = rowIn[x];
      switch (filter) {
        case 0: break;
        case 1: v = (v + a) & 0xff; break;
        case 2: v = (v + b) & 0xff; break;
        case 3: v = (v + ((a + b) >> 1)) & 0xff; break;
        case 4: {
          const p = a + b - c;
          const pa = Math.abs(p - a);
          const pb = Math.abs(p - b);
          const pc = Math.abs(p - c);
          const pred = pa <= pb && pa <= pc ? a : pb <= pc ? b : c;
          v = (v + pred) & 0xff;
          break;
        }
        default:
          throw new Error(`${origin}: unknown PNG filter ${filter} on row ${y}`);
      }
      row[x] = v;
    }
  }

  const out = new Uint8Array(width * height * 3);
  for (let i = 0; i < width * height; i++) {
    const src = i * channels;
    switch (colorType) {
      case 0:
      case 4:
        out[i * 3] = out[i * 3 + 1] = out[i * 3 + 2] = lines[src];
        break;
      case 2:
      case 6:
        out[i * 3] = lines[src];
        out[i * 3 + 1] = lines[src + 1];
        out[i * 3 + 2] = lines[src + 2];
        break;
      case 3: {
        if (!palette) {
          throw new Error(`${origin}: palette PNG without PLTE chunk`);
        }
        const p = lines[src] * 3;
        out[i * 3] = palette[p];
        out[i * 3 + 1] = palette[p + 1];
        out[i * 3 + 2] = palette[p + 2];
        break;
      }
    }
  }
  return { width, height, data: out };
}

export function decodePnm(buf: Uint8Array, origin = "<pnm>"): RgbImage {
  const magic = Buffer.from(buf.subarray(0, 2)).toString("latin1");
  if (!["P2", "P3", "P5", "P6"].includes(magic)) {
    throw new Error(`${origin}: unsupported PNM magic ${magic}`);
  }
  // header tokens: magic, width, height, maxval; comments start with '#'
  let pos = 2;
  const tokens: number[] = [];
  while (tokens.length < 3) {
    const ch = String.fromCharCode(buf[pos]);
    if (ch === "#") {
      while (buf[pos] !== 10) pos++;
      pos++;
    } else if (/\s/.test(ch)) {
      pos++;
    } else {
      let tok = "";
      while (pos < buf.length && !/\s/.test(String.fromCharCode(buf[pos]))) {
        tok += String.fromCharCode(buf[pos]);
        pos++;
      }
      tokens.push(parseInt(tok, 10));
    }
  }
  const [width, height, maxval] = tokens;
  if (!(width > 0 && height > 0) || !(maxval > 0 && maxval <= 255)) {
    throw new Error(`${origin}: bad PNM header ${width}x${height} maxval ${maxval}`);
  }
  const gray = magic === "P2" || magic === "P5";
  const n = width * height * (gray ? 1 : 3);
  const values = new Uint8Array(n);
  if (magic === "P5" || magic === "P6") {
    pos++; // single whitespace after maxval
    if (buf.length - pos < n) {
      throw new Error(`${origin}: truncated PNM pixel data`);
    }
    values.set(buf.subarray(pos, pos + n));
  } else {
    const text = Buffer.from(buf.subarray(pos)).toString("latin1");
    const nums = text.split(/\s+/).filter((t) => t.length);
    if (nums.length < n) {
      throw new Error(`${origin}: truncated PNM pixel data`);
    }
    for (let i = 0; i < n; i++) values[i] = parseInt(nums[i], 10);
  }
  const out = new Uint8Array(width * height * 3);
  for (let i = 0; i < width * height; i++) {
    if (gray) {
      out[i * 3] = out[i * 3 + 1] = out[i * 3 + 2] = values[i];
    } else {
      out[i * 3] = values[i * 3];
      out[i * 3 + 1] = values[i * 3 + 1];
      out[i * 3 + 2] = values[i * 3 + 2];
    }
  }
  return { width, height, data: out };
}

export function decodeImage(buf: Uint8Array, filename: string): RgbImage {
  if (isPng(buf)) {
    return decodePng(buf, filename);
  }
  const magic = Buffer.from(buf.subarray(0, 2)).toString("latin1");
  if (["P2", "P3", "P5", "P6"].includes(magic)) {
    return decodePnm(buf, filename);
  }
  throw new Error(`${filename}: undecodable image (not PNG or PNM)`);
}

/**
 * Bilinear resize to size x size, returning per-channel float64 planes in
 * [0, 1], laid out channel-major (C, H, W). Pixel centers sit at integer
 * coordinates plus one half.
 */
export function resizeBilinear(img: RgbImage, size: number, grayscale: boolean): Float64Array {
  const channels = grayscale ? 1 : 3;
  const out = new Float64Array(channels * size * size);
  const sx = img.width / size;
  const sy = img.height / size;
  for (let y = 0; y < size; y++) {
    const fy = Math.min(Math.max((y + 0.5) * sy - 0.5, 0), img.height - 1);
    const y0 = Math.floor(fy);
    const y1 = Math.min(y0 + 1, img.height - 1);
    const wy = fy - y0;
    for (let x = 0; x < size; x++) {
      const fx = Math.min(Math.max((x + 0.5) * sx - 0.5, 0), img.width - 1);
      const x0 = Math.floor(fx);
      const x1 = Math.min(x0 + 1, img.width - 1);
      const wx = fx - x0;
      const rgb = [0, 0, 0];
      for (let c = 0; c < 3; c++) {
        const v00 = img.data[(y0 * img.width + x0) * 3 + c];
        const v01 = img.data[(y0 * img.width + x1) * 3 + c];
        const v10 = img.data[(y1 * img.width + x0) * 3 + c];
        const v11 = img.data[(y1 * img.width + x1) * 3 + c];
        rgb[c] = (v00 * (1 - wx) + v01 * wx) * (1 - wy) + (v10 * (1 - wx) + v11 * wx) * wy;
      }
      if (grayscale) {
        // ITU-R BT.601 luma
        out[y * size + x] = (0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]) / 255.0;
      } else {
        for (let c = 0; c < 3; c++) {
          out[c * size * size + y * size + x] = rgb[c] / 255.0;
        }
      }
    }
  }
  return out;
}
