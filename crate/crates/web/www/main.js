import init, { marginalPath, expectedSizes, attentionWeights, boundCurve, etaCap } from "./pkg/mobifl_web.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function clear(canvas) {
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  ctx.font = "12px system-ui";
  return ctx;
}

function bars(canvas, values, labels, max) {
  const ctx = clear(canvas);
  const h = canvas.height - 20;
  const w = canvas.width / values.length;
  values.forEach((v, i) => {
    const bh = max > 0 ? (v / max) * (h - 14) : 0;
    ctx.fillStyle = "#4a78b5";
    ctx.fillRect(i * w + 4, h - bh, w - 8, bh);
    ctx.fillStyle = "#222";
    ctx.fillText(v.toFixed(3), i * w + 6, h - bh - 3);
    ctx.fillText(labels[i], i * w + 6, canvas.height - 5);
  });
}

function line(canvas, ys) {
  const ctx = clear(canvas);
  const pts = ys.map((y, i) => [i + 1, y]).filter(([, y]) => Number.isFinite(y));
  if (pts.length === 0) {
    ctx.fillText("no admissible point", 10, 20);
    return;
  }
  const lo = Math.min(...pts.map((p) => p[1]));
  const hi = Math.max(...pts.map((p) => p[1]));
  const pad = 30;
  const sx = (x) => pad + ((x - 1) / Math.max(1, ys.length - 1)) * (canvas.width - 2 * pad);
  const sy = (y) => canvas.height - pad - ((y - lo) / (hi - lo || 1)) * (canvas.height - 2 * pad);
  ctx.strokeStyle = "#b5514a";
  ctx.beginPath();
  pts.forEach(([x, y], i) => (i ? ctx.lineTo(sx(x), sy(y)) : ctx.moveTo(sx(x), sy(y))));
  ctx.stroke();
  ctx.fillStyle = "#222";
  ctx.fillText(hi.toPrecision(5), 2, pad - 6);
  ctx.fillText(lo.toPrecision(5), 2, canvas.height - pad + 14);
  ctx.fillText("κ1 = 1", pad, canvas.height - 6);
  ctx.fillText(`κ1 = ${ys.length}`, canvas.width - pad - 40, canvas.height - 6);
}

function show(id, fn) {
  try {
    $(id).className = "";
    $(id).textContent = fn();
  } catch (e) {
    $(id).className = "err";
    $(id).textContent = String(e.message ?? e);
  }
}

function mobility() {
  $("m-ps-v").textContent = $("m-ps").value;
  $("m-steps-v").textContent = $("m-steps").value;
  show("m-out", () => {
    const n = num("m-n");
    const steps = num("m-steps");
    const path = marginalPath(n, num("m-ps"), num("m-start"), steps);
    const last = Array.from(path.slice(steps * n));
    bars($("m-canvas"), last, last.map((_, i) => `cluster ${i}`), 1);
    const sizes = expectedSizes(num("m-users"), n, num("m-ps"), num("m-start"), steps);
    return `expected cluster sizes: ${Array.from(sizes, (s) => s.toFixed(2)).join(", ")}`;
  });
}

function parseRow(text) {
  return text.split(/[,\s]+/).filter((s) => s.length).map(Number);
}

function attention() {
  $("a-sigma-v").textContent = $("a-sigma").value;
  show("a-out", () => {
    const rows = $("a-cands").value.split("\n").map(parseRow).filter((r) => r.length);
    const anchor = parseRow($("a-anchor").value);
    const w = attentionWeights(new Float64Array(rows.flat()), new Float64Array(anchor), num("a-sigma"), $("a-pos").checked);
    bars($("a-canvas"), Array.from(w), rows.map((r) => `(${r.join(", ")})`), Math.max(...w));
    return `sum = ${w.reduce((a, b) => a + b, 0).toFixed(15)}`;
  });
}

function bounds() {
  $("b-ps-v").textContent = $("b-ps").value;
  show("b-out", () => {
    const args = [num("b-m"), num("b-n"), num("b-ps"), num("b-eta"), num("b-k2"), num("b-k1")];
    const hfl = Array.from(boundCurve(false, ...args));
    line($("b-canvas"), hfl);
    const macfl = Array.from(boundCurve(true, ...args));
    const ok = hfl.filter(Number.isFinite).length;
    const cap = etaCap(1, num("b-k2"));
    return `HFL finite for ${ok} of ${hfl.length} values of κ1 (cap at κ1 = 1 is ${cap.toExponential(3)}); ` +
      `MACFL at κ1 = 1: ${macfl[0].toPrecision(6)}`;
  });
}

await init();
$("status").textContent = "";
for (const [ids, fn] of [
  [["m-n", "m-ps", "m-start", "m-steps", "m-users"], mobility],
  [["a-cands", "a-anchor", "a-sigma", "a-pos"], attention],
  [["b-m", "b-n", "b-ps", "b-eta", "b-k2", "b-k1"], bounds],
]) {
  ids.forEach((id) => $(id).addEventListener("input", fn));
  fn();
}
