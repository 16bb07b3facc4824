// Typed client for the review service API. All state lives server-side;
// the UI never derives rates itself.

export interface PatientSummary {
  patient_id: string;
  ds_score: number;
  entity_counts: Record<string, number>;
  complete: boolean;
}

export interface AttributeField {
  name: string;
  kind: 'Date' | 'Integer' | 'Decimal' | 'Categorical' | 'Text' | 'Boolean';
  values: string[] | null;
  required: boolean;
}

export type AttributeValue = string | number | boolean | null;

export interface ProvenanceSpan {
  document_id: string;
  chunk_index: number;
  char_start: number;
  char_end: number;
}

export interface InstanceView {
  instance_id: string;
  entity_type: string;
  attributes: Record<string, AttributeValue>;
  provenance: ProvenanceSpan[];
  decision: 'approve' | 'edit' | 'add' | null;
  edited_attributes: Record<string, AttributeValue> | null;
  reviewer_added: boolean;
}

export interface EntityGroup {
  schema: AttributeField[];
  instances: InstanceView[];
}

export interface PatientEntities {
  patient_id: string;
  entities: Record<string, EntityGroup>;
}

export interface DocumentView {
  document_id: string;
  text: string;
  highlights: { instance_id: string; char_start: number; char_end: number }[];
}

export interface Dashboard {
  approved_rate: number | null;
  edit_rate: number | null;
  missing_rate: number | null;
  acceptance_over_extracted: number | null;
  edit_over_extracted: number | null;
  n_correct: number;
  n_incorrect: number;
  n_missing: number;
  per_entity: Record<string, Dashboard>;
}

export interface DecisionPayload {
  patient_id: string;
  action: 'approve' | 'edit' | 'add';
  instance_id?: string;
  edited_attributes?: Record<string, AttributeValue>;
  new_instance?: {
    entity_type: string;
    attributes: Record<string, AttributeValue>;
  };
  reviewer?: string;
}

export class ApiError extends Error {
  constructor(message: string, readonly status: number) {
    super(message);
  }
}

async function request<T>(base: string, path: string, init?: RequestInit): Promise<T> {
  const response = await fetch(`${base}${path}`, init);
  if (!response.ok) {
    let detail = response.statusText;
    try {
      const body = await response.json();
      if (body && typeof body.detail === 'string') detail = body.detail;
    } catch {
      // non-JSON error body; keep the status text
    }
    throw new ApiError(detail, response.status);
  }
  return (await response.json()) as T;
}

export class ReviewApi {
  constructor(readonly base: string = '') {}

  patients(): Promise<PatientSummary[]> {
    return request(this.base, '/api/patients');
  }

  entities(patientId: string): Promise<PatientEntities> {
    return request(this.base, `/api/patients/${encodeURIComponent(patientId)}/entities`);
  }

  document(patientId: string, documentId: string): Promise<DocumentView> {
    return request(
      this.base,
      `/api/patients/${encodeURIComponent(patientId)}/documents/${encodeURIComponent(documentId)}`,
    );
  }

  dashboard(): Promise<Dashboard> {
    return request(this.base, '/api/dashboard');
  }

  submitDecision(payload: DecisionPayload): Promise<{ ok: boolean; dashboard: Dashboard }> {
    return request(this.base, '/api/decisions', {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify(payload),
    });
  }

  markComplete(patientId: string, complete: boolean): Promise<{ complete: boolean }> {
    return request(this.base, `/api/patients/${encodeURIComponent(patientId)}/complete`, {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify({ complete }),
    });
  }
}
