import init, { lookahead_mask, corrupt_preview, align } from "./pkg/satseg_web.js";

const $ = (id) => document.getElementById(id);

function call(f, ...args) {
  try {
    return [JSON.parse(f(...args)), null];
  } catch (e) {
    return [null, e.message || String(e)];
  }
}

function error(el, msg) {
  el.innerHTML = "";
  const p = document.createElement("p");
  p.className = "err";
  p.textContent = msg;
  el.append(p);
}

function list(el, title, items) {
  const h = document.createElement("h3");
  h.textContent = title;
  const ol = document.createElement("ol");
  for (const s of items) {
    const li = document.createElement("li");
    li.textContent = s;
    ol.append(li);
  }
  el.append(h, ol);
}

function drawMask() {
  const [r, err] = call(lookahead_mask, +$("m-len").value, +$("m-layers").value, +$("m-total").value);
  const grid = $("m-grid");
  if (err) {
    $("m-info").textContent = "";
    return error(grid, err);
  }
  $("m-info").textContent =
    `${r.per_layer} per layer, reach ${r.reach}` + (r.remainder ? ` (${r.remainder} unused)` : "");
  const table = document.createElement("table");
  table.className = "mask";
  r.mask.forEach((row, i) => {
    const tr = table.insertRow();
    row.forEach((ok, j) => {
      const td = tr.insertCell();
      td.className = ok ? "on" : i === 0 && j <= r.horizon[0] ? "reach" : "off";
      td.title = `${i} -> ${j}`;
    });
  });
  grid.replaceChildren(table);
}

function runCorrupt() {
  const [r, err] = call(corrupt_preview, $("c-text").value, $("c-scheme").value, +$("c-seed").value >>> 0);
  const out = $("c-split");
  out.innerHTML = "";
  if (err) {
    $("c-out").textContent = "";
    return error(out, err);
  }
  $("c-out").textContent = r.text;
  list(out, `gold (${r.boundaries.length})`, r.sentences);
  list(out, `rule split (${r.rule_found} of ${r.boundaries.length} gold boundaries)`, r.rule_sentences);
}

function runAlign() {
  const [r, err] = call(align, $("a-out").value, $("a-ref").value);
  const out = $("a-split");
  out.innerHTML = "";
  if (err) {
    $("a-rows").textContent = "";
    return error(out, err);
  }
  $("a-rows").textContent = `${r.output_row}\n${r.reference_row}\nscore ${r.score.toFixed(1)}, floor ${r.floor.toFixed(1)}`;
  if (r.projected === null) return error(out, "score below the floor: no projection");
  list(out, "projected", r.sentences);
}

await init();
for (const id of ["m-len", "m-layers", "m-total"]) $(id).addEventListener("input", drawMask);
$("c-run").addEventListener("click", runCorrupt);
$("a-run").addEventListener("click", runAlign);
drawMask();
runCorrupt();
runAlign();
