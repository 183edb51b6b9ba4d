// Expects the wasm-pack output in ./pkg (wasm-pack build --target web --out-dir www/pkg).
import init, { pink_image, filter_gray, radial_mask, ToyBatch } from "./pkg/neurovis_web.js";

const SIZE = 64;
const $ = (id) => document.getElementById(id);

function drawGray(canvas, values, w, h, lo, hi) {
  const off = new OffscreenCanvas(w, h);
  const ctx = off.getContext("2d");
  const img = ctx.createImageData(w, h);
  for (let i = 0; i < w * h; i++) {
    const v = Math.round(255 * Math.min(1, Math.max(0, (values[i] - lo) / (hi - lo))));
    img.data.set([v, v, v, 255], 4 * i);
  }
  ctx.putImageData(img, 0, 0);
  const out = canvas.getContext("2d");
  out.imageSmoothingEnabled = false;
  out.drawImage(off, 0, 0, canvas.width, canvas.height);
}

let seed = 1;
let texture = null;

function renderFilter() {
  const cutoff = Number($("cutoff").value);
  $("cutoff-value").textContent = cutoff.toFixed(2);
  if (!texture) texture = pink_image(SIZE, Number($("alpha").value), seed);
  const low = filter_gray(texture, SIZE, SIZE, cutoff, false);
  const high = filter_gray(texture, SIZE, SIZE, cutoff, true);
  drawGray($("img-orig"), texture, SIZE, SIZE, 0, 1);
  drawGray($("img-mask"), radial_mask(SIZE, SIZE, cutoff), SIZE, SIZE, 0, 1);
  drawGray($("img-low"), low, SIZE, SIZE, 0, 1);
  // the high band is zero-mean, so centre it
  drawGray($("img-high"), high, SIZE, SIZE, -0.5, 0.5);
}

function renderNce() {
  const b = Number($("batch").value);
  const noise = Number($("noise").value);
  const tau = Math.pow(10, Number($("tau").value));
  const batch = new ToyBatch(b, 32, noise, 7);
  drawGray($("sim"), batch.similarity(), b, b, -1, 1);

  const taus = [];
  for (let x = -2; x <= 2.0001; x += 0.05) taus.push(Math.pow(10, x));
  const losses = taus.map((t) => batch.loss(t));
  const canvas = $("curve");
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const top = Math.max(...losses, Math.log(b)) * 1.05;
  const px = (t) => ((Math.log10(t) + 2) / 4) * canvas.width;
  const py = (l) => canvas.height - (l / top) * canvas.height;
  ctx.strokeStyle = "#999";
  ctx.setLineDash([4, 4]);
  ctx.beginPath();
  ctx.moveTo(0, py(Math.log(b)));
  ctx.lineTo(canvas.width, py(Math.log(b)));
  ctx.stroke();
  ctx.setLineDash([]);
  ctx.strokeStyle = "#1f5fa8";
  ctx.beginPath();
  taus.forEach((t, i) => (i ? ctx.lineTo(px(t), py(losses[i])) : ctx.moveTo(px(t), py(losses[i]))));
  ctx.stroke();
  const loss = batch.loss(tau);
  ctx.fillStyle = "#c0392b";
  ctx.beginPath();
  ctx.arc(px(tau), py(loss), 4, 0, 2 * Math.PI);
  ctx.fill();

  const top1 = batch.topk(1);
  const top5 = batch.topk(Math.min(5, b));
  $("nce-readout").textContent =
    `tau ${tau.toFixed(3)}  loss ${loss.toFixed(4)}  ln B ${Math.log(b).toFixed(4)}  ` +
    `top-1 ${(100 * top1).toFixed(1)}%  top-5 ${(100 * top5).toFixed(1)}%`;
  batch.free();
}

await init();
$("cutoff").addEventListener("input", renderFilter);
$("alpha").addEventListener("input", () => { texture = null; renderFilter(); });
$("reseed").addEventListener("click", () => { seed += 1; texture = null; renderFilter(); });
for (const id of ["batch", "noise", "tau"]) $(id).addEventListener("input", renderNce);
renderFilter();
renderNce();
