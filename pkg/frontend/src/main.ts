// Three-panel review app: patients + entity tree, typed detail form,
// source panel with highlights, and a live dashboard strip.

import {
  ApiError,
  AttributeField,
  DecisionPayload,
  Dashboard,
  DocumentView,
  InstanceView,
  PatientEntities,
  PatientSummary,
  ReviewApi,
} from './api.js';
import { widgetFor, valueToInput } from './form.js';
import { buildSegments, firstHighlightStart } from './highlight.js';
import { buildEntityTree, dashboardView, displayedAttributes } from './state.js';
import { validateForm } from './validate.js';

const api = new ReviewApi('');

interface AppState {
  patients: PatientSummary[];
  patientId: string | null;
  entities: PatientEntities | null;
  selected: InstanceView | null;
  selectedSchema: AttributeField[];
  document: DocumentView | null;
  addingEntityType: string | null;
}

const state: AppState = {
  patients: [],
  patientId: null,
  entities: null,
  selected: null,
  selectedSchema: [],
  document: null,
  addingEntityType: null,
};

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className = '',
  text = '',
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text) node.textContent = text;
  return node;
}

function byId(id: string): HTMLElement {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node;
}

function showBanner(message: string, retry?: () => void): void {
  const banner = byId('banner');
  banner.textContent = '';
  banner.classList.remove('hidden');
  banner.append(el('span', '', message));
  if (retry) {
    const button = el('button', 'retry', 'Retry');
    button.addEventListener('click', () => {
      banner.classList.add('hidden');
      retry();
    });
    banner.append(button);
  }
  const dismiss = el('button', 'dismiss', 'Dismiss');
  dismiss.addEventListener('click', () => banner.classList.add('hidden'));
  banner.append(dismiss);
}

// ---------------------------------------------------------------------------
// Dashboard
// ---------------------------------------------------------------------------

function renderDashboard(dashboard: Dashboard): void {
  const view = dashboardView(dashboard);
  byId('rate-approved').textContent = view.approved;
  byId('rate-edited').textContent = view.edited;
  byId('rate-missing').textContent = view.missing;
  byId('rate-counts').textContent =
    `${view.counts.correct} approved / ${view.counts.incorrect} edited / ` +
    `${view.counts.missing} added`;
}

async function refreshDashboard(): Promise<void> {
  try {
    renderDashboard(await api.dashboard());
  } catch (error) {
    showBanner(`Dashboard unavailable: ${String(error)}`, refreshDashboard);
  }
}

// ---------------------------------------------------------------------------
// Patient list and entity tree
// ---------------------------------------------------------------------------

async function loadPatients(): Promise<void> {
  try {
    state.patients = await api.patients();
  } catch (error) {
    showBanner(`Cannot load patients: ${String(error)}`, loadPatients);
    return;
  }
  const list = byId('patient-list');
  list.textContent = '';
  for (const patient of state.patients) {
    const item = el('li', patient.patient_id === state.patientId ? 'active' : '');
    const label = el('span', 'pid', patient.patient_id);
    const score = el('span', 'ds', `DS ${patient.ds_score}`);
    item.append(label, score);
    if (patient.complete) item.append(el('span', 'done', 'complete'));
    item.addEventListener('click', () => void selectPatient(patient.patient_id));
    list.append(item);
  }
}

async function selectPatient(patientId: string): Promise<void> {
  state.patientId = patientId;
  state.selected = null;
  state.document = null;
  state.addingEntityType = null;
  try {
    state.entities = await api.entities(patientId);
  } catch (error) {
    showBanner(`Cannot load entities: ${String(error)}`, () => void selectPatient(patientId));
    return;
  }
  renderEntityTree();
  renderDetail();
  renderSource();
  await loadPatients();
  const complete = el('button', 'mark-complete', 'Mark patient complete');
  complete.addEventListener('click', async () => {
    await api.markComplete(patientId, true);
    await loadPatients();
  });
  const header = byId('tree-header');
  header.textContent = `Entities for ${patientId}`;
  header.append(complete);
}

function renderEntityTree(): void {
  const tree = byId('entity-tree');
  tree.textContent = '';
  if (!state.entities) {
    tree.append(el('p', 'empty', 'Select a patient.'));
    return;
  }
  const nodes = buildEntityTree(state.entities);
  if (!nodes.length) {
    tree.append(el('p', 'empty', 'No extracted entities for this patient.'));
    return;
  }
  for (const node of nodes) {
    const section = el('div', 'entity-group');
    const title = el('h3', '', `${node.entityType} (${node.decided}/${node.total})`);
    if (node.complete) title.append(el('span', 'done', 'complete'));
    section.append(title);
    const list = el('ul');
    for (const inst of node.instances) {
      const item = el('li', inst === state.selected ? 'active' : '');
      const anchor = summarizeInstance(inst);
      item.append(el('span', 'inst-label', anchor));
      if (inst.decision) item.append(el('span', `badge ${inst.decision}`, inst.decision));
      if (inst.reviewer_added) item.append(el('span', 'badge add', 'reviewer-added'));
      item.addEventListener('click', () => void selectInstance(node.entityType, inst));
      list.append(item);
    }
    const addButton = el('button', 'add-instance', `Add missing ${node.entityType}`);
    addButton.addEventListener('click', () => {
      state.addingEntityType = node.entityType;
      state.selected = null;
      renderDetail();
    });
    section.append(list, addButton);
    tree.append(section);
  }
}

function summarizeInstance(inst: InstanceView): string {
  const attributes = displayedAttributes(inst);
  for (const [, value] of Object.entries(attributes)) {
    if (value !== null && value !== undefined && String(value).length) {
      return String(value);
    }
  }
  return inst.instance_id.slice(0, 8);
}

// ---------------------------------------------------------------------------
// Detail form
// ---------------------------------------------------------------------------

async function selectInstance(entityType: string, inst: InstanceView): Promise<void> {
  state.selected = inst;
  state.addingEntityType = null;
  state.selectedSchema = state.entities?.entities[entityType]?.schema ?? [];
  renderEntityTree();
  renderDetail();
  await loadSourceFor(inst);
}

function formInputs(
  fields: AttributeField[],
  initial: Record<string, unknown>,
): { container: HTMLElement; read: () => Record<string, string> } {
  const container = el('div', 'form-grid');
  const inputs = new Map<string, HTMLInputElement | HTMLSelectElement>();
  for (const field of fields) {
    const label = el('label', '', field.name);
    if (field.required) label.append(el('span', 'req', '*'));
    const spec = widgetFor(field);
    let input: HTMLInputElement | HTMLSelectElement;
    if (spec.control === 'select') {
      input = el('select');
      input.append(el('option', '', ''));
      for (const option of spec.options) {
        const node = el('option', '', option);
        node.setAttribute('value', option);
        input.append(node);
      }
      input.value = valueToInput(initial[field.name]);
    } else if (spec.control === 'checkbox') {
      input = el('input');
      input.type = 'checkbox';
      input.checked = initial[field.name] === true;
    } else {
      input = el('input');
      input.type = spec.control === 'number' ? 'number' : spec.control;
      if (spec.control === 'number') input.step = spec.step;
      input.value = valueToInput(initial[field.name]);
    }
    input.setAttribute('data-field', field.name);
    inputs.set(field.name, input);
    const row = el('div', 'form-row');
    row.append(label, input);
    container.append(row);
  }
  return {
    container,
    read: () => {
      const raw: Record<string, string> = {};
      for (const [name, input] of inputs.entries()) {
        if (input instanceof HTMLInputElement && input.type === 'checkbox') {
          raw[name] = input.checked ? 'true' : '';
        } else {
          raw[name] = input.value;
        }
      }
      return raw;
    },
  };
}

function renderDetail(): void {
  const panel = byId('detail-panel');
  panel.textContent = '';
  if (state.addingEntityType && state.entities) {
    renderAddForm(panel, state.addingEntityType);
    return;
  }
  const inst = state.selected;
  if (!inst || !state.entities) {
    panel.append(el('p', 'empty', 'Select an entity instance to review.'));
    return;
  }
  panel.append(el('h2', '', inst.entity_type));
  const form = formInputs(state.selectedSchema, displayedAttributes(inst));
  panel.append(form.container);
  const errors = el('p', 'form-errors hidden');
  panel.append(errors);

  const actions = el('div', 'actions');
  const approve = el('button', 'approve', 'Approve');
  approve.addEventListener('click', () => void submitDecision({
    patient_id: state.patientId ?? '',
    action: 'approve',
    instance_id: inst.instance_id,
  }, inst, 'approve'));

  const save = el('button', 'edit', 'Save edits');
  save.addEventListener('click', () => {
    const checked = validateForm(state.selectedSchema, form.read());
    if (!checked.ok) {
      errors.textContent = checked.errors.join('; ');
      errors.classList.remove('hidden');
      return;
    }
    errors.classList.add('hidden');
    const edited: Record<string, unknown> = {};
    const current = displayedAttributes(inst);
    for (const [name, value] of Object.entries(checked.values)) {
      const before = current[name] ?? null;
      if (JSON.stringify(before) !== JSON.stringify(value)) edited[name] = value;
    }
    if (!Object.keys(edited).length) {
      errors.textContent = 'No changes to save.';
      errors.classList.remove('hidden');
      return;
    }
    void submitDecision({
      patient_id: state.patientId ?? '',
      action: 'edit',
      instance_id: inst.instance_id,
      edited_attributes: edited as DecisionPayload['edited_attributes'],
    }, inst, 'edit', () => {
      errors.textContent = '';
    });
  });
  actions.append(approve, save);
  panel.append(actions);
}

function renderAddForm(panel: HTMLElement, entityType: string): void {
  const schema = state.entities?.entities[entityType]?.schema ?? [];
  panel.append(el('h2', '', `Add missing ${entityType}`));
  const form = formInputs(schema, {});
  panel.append(form.container);
  const errors = el('p', 'form-errors hidden');
  panel.append(errors);
  const submit = el('button', 'add', 'Add instance');
  submit.addEventListener('click', () => {
    const checked = validateForm(schema, form.read());
    const values = Object.fromEntries(
      Object.entries(checked.values).filter(([, v]) => v !== null),
    );
    if (!checked.ok || !Object.keys(values).length) {
      errors.textContent = checked.errors.join('; ') || 'Fill in at least one attribute.';
      errors.classList.remove('hidden');
      return;
    }
    void submitDecision({
      patient_id: state.patientId ?? '',
      action: 'add',
      new_instance: { entity_type: entityType, attributes: values },
    }, null, 'add');
  });
  panel.append(submit);
}

async function submitDecision(
  payload: DecisionPayload,
  inst: InstanceView | null,
  optimistic: 'approve' | 'edit' | 'add',
  onSuccess?: () => void,
): Promise<void> {
  const before = inst?.decision ?? null;
  if (inst) inst.decision = optimistic; // optimistic; reconciled below
  renderEntityTree();
  try {
    const result = await api.submitDecision(payload);
    renderDashboard(result.dashboard);
    onSuccess?.();
    if (state.patientId) {
      state.entities = await api.entities(state.patientId);
      if (inst) {
        for (const group of Object.values(state.entities.entities)) {
          const match = group.instances.find((i) => i.instance_id === inst.instance_id);
          if (match) {
            state.selected = match;
            state.selectedSchema = group.schema;
          }
        }
      }
      renderEntityTree();
      renderDetail();
    }
  } catch (error) {
    if (inst) inst.decision = before; // reconcile the optimistic update
    renderEntityTree();
    renderDetail();
    const message = error instanceof ApiError ? error.message : String(error);
    const errors = byId('detail-panel').querySelector('.form-errors');
    if (errors) {
      errors.textContent = `Rejected by server: ${message}`;
      errors.classList.remove('hidden');
    } else {
      showBanner(`Decision rejected: ${message}`);
    }
  }
}

// ---------------------------------------------------------------------------
// Source panel
// ---------------------------------------------------------------------------

async function loadSourceFor(inst: InstanceView): Promise<void> {
  const documentId = inst.provenance[0]?.document_id;
  if (!documentId || !state.patientId) {
    state.document = null;
    renderSource();
    return;
  }
  try {
    state.document = await api.document(state.patientId, documentId);
  } catch (error) {
    showBanner(`Cannot load document: ${String(error)}`, () => void loadSourceFor(inst));
    return;
  }
  renderSource();
  const start = firstHighlightStart(state.document.highlights, inst.instance_id);
  if (start !== null) {
    const target = byId('source-text').querySelector(`[data-start="${start}"]`);
    target?.scrollIntoView({ block: 'center' });
  }
}

function renderSource(): void {
  const panel = byId('source-text');
  panel.textContent = '';
  byId('source-header').textContent = state.document
    ? `Source: ${state.document.document_id}`
    : 'Source document';
  if (!state.document) {
    panel.append(el('p', 'empty',
      state.selected ? 'No source span for this instance.' : 'Select an instance.'));
    return;
  }
  const segments = buildSegments(
    state.document.text,
    state.document.highlights,
    state.selected?.instance_id ?? null,
  );
  for (const segment of segments) {
    const span = el('span', '', segment.text);
    if (segment.instanceIds.length) span.className = 'hl';
    if (segment.selected) span.className = 'hl selected';
    span.setAttribute('data-start', String(segment.start));
    panel.append(span);
  }
}

// ---------------------------------------------------------------------------
// Boot
// ---------------------------------------------------------------------------

async function boot(): Promise<void> {
  await Promise.all([loadPatients(), refreshDashboard()]);
  renderEntityTree();
  renderDetail();
  renderSource();
}

void boot();
